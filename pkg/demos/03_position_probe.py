"""Train two small classifiers on the marker-position task and compare them.

The label is the index of the single marker symbol in a sequence, so a model
without position information cannot do better than chance (1/16).  Takes a
few minutes on one CPU core.

Run with ``python demos/03_position_probe.py``.
"""

from riemannformer.data import synthetic_splits
from riemannformer.model import SeqConfig, param_count
from riemannformer.positional import MechanismConfig
from riemannformer.training import TrainConfig, train

splits = synthetic_splits(16, 2048, 512, seed=0)
schedule = TrainConfig(epochs=30, batch=64, lr=3e-3, warmup_epochs=2)



def every_fifth(msg):
    epoch = int(msg.split()[1].rstrip(":"))
    if epoch % 5 == 4:
        print("  " + msg)


for name in ("nopos", "riemann"):
    cfg = SeqConfig(mechanism=MechanismConfig.from_name(name))
    print(f"\n{name}: {param_count(cfg)['total']} parameters")
    result = train(cfg, schedule, splits, log=every_fifth)
    print(f"{name}: final test accuracy {result.metrics[-1][3]:.3f}")
