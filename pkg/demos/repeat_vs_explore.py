"""Compare a trained model with popularity baselines on a repeat-heavy synthetic log.

Shows the repeat/exploration split of each recommender's hits: personal
top lists only ever recommend known songs, while the model can reach
unheard songs from the user's taste clusters.

    python demos/repeat_vs_explore.py
"""
from relisten.config import RunConfig
from relisten.dataset import build_dataset
from relisten.metrics import evaluate
from relisten.model import Featurizer
from relisten.recsys import BaselineRecommender, ModelRecommender
from relisten.synth import PROFILES, generate
from relisten.training import train

config = RunConfig(
    L=10, step=2, d=8, lr=0.003, epochs=40, lam=1.0, patience=0, full_window=True, batch_size=16,
    neg_mode="uniform", residual=True,
)
data = build_dataset(generate(PROFILES["repeat"]), config)
print(data.summary())

model = train(data, config).model
recommenders = {
    "model": ModelRecommender(model, Featurizer.for_dataset(data)),
    "g-top": BaselineRecommender("g-top", data),
    "p-top": BaselineRecommender("p-top", data),
    "actr-repeat": BaselineRecommender("actr-repeat", data),
}
print(f"{'':12} {'recall':>7} {'rep':>7} {'exp':>6} {'ratio':>6} {'bias':>7} {'MR':>5}")
for name, rec in recommenders.items():
    r = evaluate(rec, data.splits.test, data)
    print(f"{name:12} {r.recall:7.2f} {r.recall_rep:7.2f} {r.recall_exp:6.2f} {r.rep_ratio:6.1f} {r.rep_bias:7.2f} {r.mr:5.2f}")
print("mixer weights (BL, SPR, PM):", model.mixer_weights().round(3))
