import numpy as np
import pytest

from nfarec import data, evaluation, synthetic
from nfarec.config import Config
from nfarec.metrics import ndcg_at_k, rank_items, recall_at_k
from nfarec.model import TrainingView, fit


@pytest.fixture(scope="module")
def trained():
    bundle = data.prepare_bundle(synthetic.memorizable(n_users=24, n_items=20), orders=2)
    result = fit(bundle, Config(epochs=3, d_model=8, seed=3))
    return bundle, result.best


def test_user_order_invariance(trained):
    bundle, ckpt = trained
    n = bundle.split.train.n_users
    a = evaluation.evaluate(ckpt, bundle, users=list(range(n)))
    b = evaluation.evaluate(ckpt, bundle, users=list(reversed(range(n))))
    assert a.recall == b.recall and a.ndcg == b.ndcg


def test_matches_direct_recompute(trained):
    bundle, ckpt = trained
    rep = evaluation.evaluate(ckpt, bundle)
    scores = ckpt.model(bundle.split.train.n_users).scores(TrainingView.from_bundle(bundle, ckpt.config))
    test = bundle.split.test.sequences
    vals = []
    for u, seq in enumerate(test):
        rel = {e[0] for e in seq}
        if not rel:
            continue
        seen = {e[0] for e in bundle.split.train.sequences[u]}
        ranked = list(rank_items(scores[u], seen, 20))
        vals.append((recall_at_k(ranked, rel, 20), ndcg_at_k(ranked, rel, 20)))
    assert rep.n_users == len(vals)
    assert rep.recall[20] == pytest.approx(np.mean([v[0] for v in vals]), abs=1e-12)
    assert rep.ndcg[20] == pytest.approx(np.mean([v[1] for v in vals]), abs=1e-12)


def test_skipped_users_counted(trained):
    bundle, ckpt = trained
    n = bundle.split.train.n_users
    rep = evaluation.evaluate(ckpt, bundle, positive_only=True)
    empty = sum(1 for s in bundle.split.test.sequences if not any(e[2] > 0 for e in s))
    assert rep.n_skipped == empty
    assert rep.n_users + rep.n_skipped == n


def test_kv_format(trained):
    bundle, ckpt = trained
    kv = evaluation.evaluate(ckpt, bundle).to_kv()
    pairs = [line.split("\t") for line in kv.splitlines()]
    assert all(len(p) == 2 for p in pairs)
    keys = [p[0] for p in pairs]
    assert keys[:6] == ["recall@5", "ndcg@5", "recall@10", "ndcg@10", "recall@20", "ndcg@20"]
    assert dict(pairs)["excluded_items"] == "train-seen"


def test_polarity_predictions_shape(trained):
    bundle, ckpt = trained
    pred, truth = evaluation.polarity_predictions(ckpt.model(bundle.split.train.n_users), bundle)
    n_test = sum(len(s) for s in bundle.split.test.sequences)
    assert pred.shape == truth.shape and 0 < truth.size <= n_test
    assert set(np.unique(pred)) <= {-1, 1} and set(np.unique(truth)) <= {-1, 1}


def test_export_round_trip(trained, tmp_path):
    bundle, ckpt = trained
    evaluation.export_representations(ckpt, bundle, tmp_path)
    reps = evaluation.representations(ckpt, bundle)
    back = evaluation.read_representations(tmp_path / "user_sequential.tsv")
    ids = bundle.split.train.user_ids
    assert list(back) == list(ids)
    np.testing.assert_array_equal(np.stack([back[u] for u in ids]), reps["user_sequential"])
    items = evaluation.read_representations(tmp_path / "item_representations.tsv")
    np.testing.assert_array_equal(np.stack(list(items.values())), reps["item"])
