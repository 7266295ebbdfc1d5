"""Shared builders for randomized index/decoder tests."""

import numpy as np

from higen import decoder as dec
from higen import docid as di
from higen.data import DatasetRow, Item, PageView
from higen.representation import AtomicEmbeddings


def random_index_inputs(seed, n_items=None, n_cats=None, d=8, path_len=2):
    """Random fusion vectors, scores, and category paths for index tests."""
    rng = np.random.default_rng(seed)
    if n_items is None:
        n_items = int(rng.integers(20, 501))
    if n_cats is None:
        n_cats = int(rng.integers(2, 11))
    cat_ids = [101 + c for c in range(n_cats)]
    centers = rng.normal(size=(n_cats, d)) * 3.0
    fusion, scores, paths = {}, {}, {}
    for i in range(n_items):
        c = int(rng.integers(n_cats))
        item = f"it{i:04d}"
        fusion[item] = centers[c] + rng.normal(size=d)
        scores[item] = float(rng.uniform())
        if path_len == 2:
            paths[item] = (10 + c // 3, cat_ids[c])
        else:
            paths[item] = (cat_ids[c],)
    return fusion, scores, paths


def build_random_index(seed, k=4, cs=8, max_len=16, **kw):
    fusion, scores, paths = random_index_inputs(seed, **kw)
    docids, node_scores = di.build_docids(fusion, scores, paths, max_len=max_len, k=k,
                                          cs=cs, seed=seed)
    return docids, node_scores, di.build_trie(docids, node_scores)


def decoder_world(seed, n_items=30, n_cats=3, emb=4, d_model=6, hidden=(8,), **cfg_kw):
    """Random docID index plus an untrained decoder model over it."""
    docids, node_scores, trie = build_random_index(seed, n_items=n_items, n_cats=n_cats,
                                                   path_len=1)
    catalog = [Item(item_id, d_paths_of(docids[item_id]), (f"s{item_id}",), (0.5,), 0.5)
               for item_id in sorted(docids)]
    rows = [DatasetRow(f"u{i % 3}", f"q{item_id}", (), item_id, 1, 1, 600.0 * i)
            for i, item_id in enumerate(sorted(docids))]
    cfg = dec.DecoderConfig(emb=emb, d_model=d_model, hidden=hidden, seed=seed, **cfg_kw)
    vocab_rows = rows
    model = dec.DecoderModel(dec.Vocab.build(vocab_rows, catalog), dec.PositionVocab(docids),
                             cfg)
    return docids, node_scores, trie, catalog, rows, model


def d_paths_of(d):
    return tuple(d.tokens[:d.semantic_len]) or (0,)


def clustered_world(n_clusters=4, per_cluster=6, d=4, seed=0, spread=0.6, n_pvs=40):
    """Atomic table whose items carry latent cluster structure, plus PVs in
    which clicked items come from one cluster and unclicked from others."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, 3 * d)) * 2.0
    table, labels = {}, {}
    for c in range(n_clusters):
        for j in range(per_cluster):
            vec = centers[c] + spread * rng.normal(size=3 * d)
            item = f"c{c}j{j}"
            table[item] = AtomicEmbeddings(vec[2 * d:], vec[:d], vec[d:2 * d])
            labels[item] = c
    ids_by_cluster = {c: [i for i, l in labels.items() if l == c] for c in range(n_clusters)}
    pvs = []
    for k in range(n_pvs):
        c = k % n_clusters
        other = (c + 1 + k % (n_clusters - 1)) % n_clusters
        same = [ids_by_cluster[c][i % per_cluster] for i in (k, k + 1)]
        diff = [ids_by_cluster[other][k % per_cluster]]
        pvs.append(PageView(f"pv{k}", tuple((i, 1) for i in same) + tuple((i, 0) for i in diff)))
    return table, labels, pvs
