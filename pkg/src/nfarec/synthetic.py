"""Seeded synthetic interaction logs with planted structure.

Each generator returns a list of :class:`~nfarec.data.InteractionRecord`
ready for :func:`~nfarec.data.prepare_bundle` or :func:`write_log`.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import InteractionRecord

DAY = 86_400


def _record(u, i, rating, ts) -> InteractionRecord:
    return InteractionRecord(f"u{u}", f"i{i}", float(rating), int(ts))


def memorizable(n_users: int = 50, n_items: int = 40, n_clusters: int = 4, seed: int = 0) -> list:
    """Users in a cluster each interact with every item of that cluster, in random order.

    After a 7:1:2 split the items a user has not yet seen are exactly the
    rest of their cluster, so a model that learns the clusters ranks every
    test item in the top few.
    """
    rng = np.random.default_rng(seed)
    per = n_items // n_clusters
    records = []
    for u in range(n_users):
        c = u % n_clusters
        items = rng.permutation(np.arange(c * per, (c + 1) * per))
        t0 = rng.integers(1_000_000, 2_000_000)
        for k, i in enumerate(items):
            rating = rng.choice([2, 5]) if rng.random() < 0.3 else 5
            records.append(_record(u, i, rating, t0 + k * DAY))
    return records


def alternating_polarity(n_users: int = 40, n_items: int = 30, length: int = 20, seed: int = 0) -> list:
    """Sequences that alternate between liked and disliked items.

    Items ``< n_items // 2`` are always rated 5, the rest always 2, and each
    user alternates the two pools (random starting pool), so the next
    polarity is the opposite of the current item's.
    """
    rng = np.random.default_rng(seed)
    half = n_items // 2
    records = []
    for u in range(n_users):
        start = int(rng.integers(2))
        t = int(rng.integers(1_000_000, 2_000_000))
        for k in range(length):
            liked = (k + start) % 2 == 0
            i = int(rng.integers(0, half)) if liked else int(rng.integers(half, n_items))
            records.append(_record(u, i, 5 if liked else 2, t))
            t += int(rng.integers(DAY // 2, 2 * DAY))
    return records


def polarity_clusters(n_users: int = 120, n_items: int = 60, n_clusters: int = 6,
                      per_user: int = 20, seed: int = 0) -> list:
    """Item clusters whose feedback is consistent within a cluster.

    Every user likes one "home" cluster and dislikes one "foil" cluster
    chosen from a fixed pairing, so co-interacted items across the two
    clusters carry conflicting feedback.  A user draws about 70% of events
    from home and 30% from foil, in random order.
    """
    rng = np.random.default_rng(seed)
    per = n_items // n_clusters
    foil = {c: (c + n_clusters // 2) % n_clusters for c in range(n_clusters)}
    records = []
    for u in range(n_users):
        home = u % n_clusters
        home_items = rng.permutation(np.arange(home * per, (home + 1) * per))
        foil_items = rng.permutation(np.arange(foil[home] * per, (foil[home] + 1) * per))
        n_home = min(per, int(round(per_user * 0.7)))
        n_foil = min(per, per_user - n_home)
        events = [(i, 5) for i in home_items[:n_home]] + [(i, 2) for i in foil_items[:n_foil]]
        order = rng.permutation(len(events))
        t = int(rng.integers(1_000_000, 2_000_000))
        for k in order:
            i, rating = events[k]
            records.append(_record(u, i, rating, t))
            t += int(rng.integers(DAY // 2, 2 * DAY))
    return records


def drifting_interests(n_users: int = 943, n_items: int = 1682, n_clusters: int = 40,
                       mean_length: int = 106, seed: int = 0) -> list:
    """MovieLens-100K-sized log whose users drift between item clusters.

    A user's history walks through three clusters in sequence, so the most
    recent events predict the held-out tail better than the whole history
    does.  Ratings are 1-5 with roughly 55% at 4 or above; popularity inside
    a cluster is Zipf-like.
    """
    rng = np.random.default_rng(seed)
    bounds = np.linspace(0, n_items, n_clusters + 1).astype(int)
    records = []
    for u in range(n_users):
        length = int(np.clip(rng.geometric(1.0 / mean_length), 20, 5 * mean_length))
        path = rng.choice(n_clusters, size=3, replace=False)
        cuts = np.sort(rng.choice(np.arange(1, length), size=2, replace=False))
        seg = np.searchsorted(cuts, np.arange(length), side="right")
        taste = rng.normal(0.0, 1.0, n_clusters)
        seen = set()
        t = int(rng.integers(880_000_000, 890_000_000))
        for k in range(length):
            c = path[seg[k]]
            lo, hi = bounds[c], bounds[c + 1]
            ranks = np.arange(1, hi - lo + 1)
            p = 1.0 / ranks
            p /= p.sum()
            for _ in range(8):
                i = int(lo + rng.choice(hi - lo, p=p))
                if i not in seen:
                    break
            else:
                free = [j for j in range(lo, hi) if j not in seen]
                if not free:
                    continue
                i = int(rng.choice(free))
            seen.add(i)
            rating = int(np.clip(np.round(3.6 + 0.8 * taste[c] + rng.normal(0, 0.8)), 1, 5))
            records.append(_record(u, i, rating, t))
            t += int(rng.integers(60, 3 * DAY))
    return records


def write_log(records, path, delimiter: str = ",", header: bool = False) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if header:
            fh.write(delimiter.join(("user", "item", "rating", "timestamp")) + "\n")
        for r in records:
            rating = int(r.rating) if float(r.rating).is_integer() else r.rating
            fh.write(delimiter.join((r.user_id, r.item_id, str(rating), str(r.timestamp))) + "\n")
    return path
