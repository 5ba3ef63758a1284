"""Narrative demo 2: imitation pipeline end to end at toy scale.

Generates a small expert dataset, trains the sequence policy and the BC
baseline for a few minutes, then compares them (and the effect of
temporal aggregation) on short evaluation episodes. The numbers are toy
scale; see tests/test_acceptance.py for the desk-scale protocol.

Run:  python demos/02_train_tiny_policy.py
"""

from proxlab.baselines import BcConfig, bc_train
from proxlab.dataset import generate_demonstrations
from proxlab.evaluation import BcRunner, SequenceRunner, evaluate_suite
from proxlab.mpc import NoiseConfig
from proxlab.policy import ModelConfig, train

print("generating 4 expert demonstrations x 300 steps...")
dataset = generate_demonstrations(n_traj=4, length=300, global_seed=0)

cfg = ModelConfig(d=32, z_dim=8, heads=4, enc_layers=2, dec_layers=2, n=50,
                  ff_mult=2, epochs=20, batch_size=32, batches_per_epoch=8)
print("training the sequence policy (toy size)...")
policy = train(dataset, cfg, seed=0)

print("training the BC baseline...")
bc = bc_train(dataset, BcConfig(hidden=(32, 32, 32, 32), epochs=20,
                                batch_size=32, batches_per_epoch=8), seed=0)

print("evaluating on the 5 standard seeds (500 steps each)...")
report = evaluate_suite(
    {
        "sequence": lambda: SequenceRunner(policy),
        "sequence w/o aggregation": lambda: SequenceRunner(policy, use_aggregation=False),
        "behavioral cloning": lambda: BcRunner(bc),
    },
    NoiseConfig(enabled=False), steps=500)

print(f"\n{'policy':28s} {'ATTP':>10s} {'ATRP':>10s} {'ESR':>10s} {'SEC':>10s}")
for name, entry in report["policies"].items():
    agg = entry["aggregate"]
    print(f"{name:28s} {agg['ATTP']['mean']:10.3f} {agg['ATRP']['mean']:10.4f} "
          f"{agg['ESR']['mean']:10.3f} {agg['SEC']['mean']:10.3f}")
