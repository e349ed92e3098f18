# %% [markdown]
# # Quickstart
#
# Build a small signed-feedback log, train the recommender on it, and look
# at what it ranks for a few users. Everything here runs in a few seconds.

# %%
import numpy as np

from nfarec import data, evaluation, model, synthetic
from nfarec.config import Config

# %% [markdown]
# `memorizable` gives each user every item of one cluster, in random order.
# About 30% of events get a low rating, so the feedback graph carries both signs.

# %%
records = synthetic.memorizable(n_users=50, n_items=40, seed=0)
bundle = data.prepare_bundle(records, threshold=4.0, orders=2)
print(data.format_statistics(data.dataset_statistics(bundle.split.train)))

# %% [markdown]
# The correlation matrix sums the first two orders of item-item agreement.
# Items in one cluster agree and items in different clusters never co-occur.

# %%
X = bundle.correlation.X_hat
print(np.round(X[:12, :12], 2))

# %%
result = model.fit(bundle, Config(d_model=64, epochs=60, lr=3e-3, seed=0))
for entry in result.history[::10]:
    print(entry.line())

# %%
report = evaluation.evaluate(result.best, bundle)
print(report.to_table())

# %% [markdown]
# Ranked items for user u0. Items seen in training are excluded, so the
# list should start with the rest of u0's cluster.

# %%
m = result.best.model(bundle.split.train.n_users)
scores = m.scores(model.TrainingView.from_bundle(bundle, result.best.config))
u = bundle.split.train.user_index["u0"]
seen = {e[0] for e in bundle.split.train.sequences[u]}
top = [i for i in np.argsort(-scores[u], kind="stable") if i not in seen][:5]
print([bundle.split.train.item_ids[i] for i in top])
print("held out:", sorted(bundle.split.train.item_ids[e[0]] for e in bundle.split.test.sequences[u]))
