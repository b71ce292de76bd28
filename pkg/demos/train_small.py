"""Train briefly on a reduced corpus and report detection quality and expert utilization."""

import logging

from hmrnet.data import SplitConfig, make_splits
from hmrnet.evaluate import evaluate, route_report
from hmrnet.train import TrainConfig, staged_train

logging.basicConfig(level=logging.INFO, format="%(message)s")

splits = make_splits(SplitConfig(train_per_domain=24, test_per_domain=16))
result = staged_train(TrainConfig(epochs=10), splits["train"])
for e in result.timeline:
    print(f"epoch {e['epoch']:2d} stage {e['stage']} det {e['det']:.4f} total {e['total']:+.4f}")

metrics, preds = evaluate(result.model, splits["test"])
print(f"test mAP {metrics.map:.3f}")
report = route_report(result.model, splits["test"], preds)
print(f"purity {report.purity:.3f}")
print("domain x expert counts:")
for d, row in enumerate(report.counts):
    print(f"  {d}: {row.tolist()}")
