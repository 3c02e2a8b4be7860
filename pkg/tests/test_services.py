"""Content models (the mature-answer oracle), top-k properties, assembly."""

import itertools
import random

from qmesh.config import LatencyModel, ServiceConfig, parse_config
from qmesh.model import top_k
from qmesh.quality import true_positive_rate
from qmesh.rng import RngHub
from qmesh.services import (RecommenderModel, SearchModel, draw_service_ns,
                            make_params, parse_params, decode_items,
                            encode_items, rate_for_utilization)


def search_model(shards=4, docs=50, k=10, skew=1.1, seed=1):
    cfg = ServiceConfig(shard_count=shards, docs_per_shard=docs,
                        answer_size=k, score_skew=skew)
    return SearchModel(cfg, RngHub(seed)), cfg


def test_scores_are_pure_functions_of_query():
    model, _ = search_model()
    a = model.shard_scores(123, 2)
    b = model.shard_scores(123, 2)
    assert a == b
    assert model.shard_scores(124, 2) != a


def test_document_ids_disjoint_across_shards():
    model, cfg = search_model()
    seen = set()
    for shard in range(cfg.shard_count):
        ids = set(model.shard_scores(55, shard))
        assert not (ids & seen)
        seen |= ids


def test_global_topk_equals_merge_of_full_shard_scores():
    # Independent oracle: merge every document score and sort directly.
    model, cfg = search_model()
    for term in (1, 99, 12345):
        merged = {}
        for shard in range(cfg.shard_count):
            merged.update(model.shard_scores(term, shard))
        expected = sorted(merged.items(), key=lambda kv: (-kv[1], kv[0]))[:cfg.answer_size]
        assert model.global_topk(term) == tuple(expected)


def test_local_topk_contains_every_global_member_of_that_shard():
    model, cfg = search_model()
    for term in (7, 2048):
        global_ids = {i for i, _ in model.global_topk(term)}
        for shard in range(cfg.shard_count):
            local_ids = {i for i, _ in model.shard_local_topk(term, shard)}
            shard_ids = set(model.shard_scores(term, shard))
            assert (global_ids & shard_ids) <= local_ids


def test_subset_tpr_monotone_over_all_subsets_up_to_8_shards():
    # Brute force over all 2^n availability subsets; oracle is the direct
    # top-k computation. Adding a shard never lowers the true positive rate.
    for n, seed in ((4, 3), (8, 9)):
        model, cfg = search_model(shards=n, docs=24, k=8, seed=seed)
        for term in (11, 77):
            mature = frozenset(i for i, _ in model.global_topk(term))
            tpr = {}
            for size in range(n + 1):
                for subset in itertools.combinations(range(n), size):
                    online = frozenset(i for i, _ in model.subset_topk(term, subset))
                    tpr[subset] = true_positive_rate(online, mature)
            for subset, value in tpr.items():
                for extra in range(n):
                    if extra in subset:
                        continue
                    larger = tuple(sorted(subset + (extra,)))
                    assert tpr[larger] >= value - 1e-12


def test_skew_can_concentrate_topk_in_one_shard():
    model, cfg = search_model(shards=6, docs=100, k=10, skew=2.5, seed=2)
    concentrated = 0
    for term in range(40):
        by_shard = {}
        for item_id, _ in model.global_topk(term):
            by_shard.setdefault(item_id // cfg.docs_per_shard, 0)
            by_shard[item_id // cfg.docs_per_shard] += 1
        if max(by_shard.values()) >= 8:
            concentrated += 1
    assert concentrated > 10  # one shard often dominates a query


def test_recommender_small_subset_of_catalog():
    cfg = ServiceConfig(kind="recommender", catalog_size=200, answer_size=10)
    model = RecommenderModel(cfg, RngHub(3))
    for term in (5, 500):
        large = model.db_topk(term, "large")
        small = model.db_topk(term, "small")
        assert all(i % 4 != 0 for i, _ in small)
        large_scores = dict(large)
        for item, score in small:
            if item in large_scores:
                assert large_scores[item] == score


def test_params_roundtrip():
    assert parse_params(make_params(123, True)) == (123, True)
    assert parse_params(make_params(0, False)) == (0, False)


def test_item_encoding_roundtrip():
    items = ((3, 0.25), (1, 0.125))
    assert decode_items(encode_items(items)) == list(items)
    assert decode_items("") == []


def test_service_time_draws_positive_and_near_mean():
    model = LatencyModel(mean_s=0.2, sigma=0.45, tail_probability=0.0)
    rng = random.Random(1)
    draws = [draw_service_ns(model, rng, False, 3.0) for _ in range(4000)]
    assert all(d > 0 for d in draws)
    mean = sum(draws) / len(draws) / 1e9
    assert abs(mean - 0.2) < 0.02
    heavy = draw_service_ns(model, random.Random(2), True, 3.0)
    light = draw_service_ns(model, random.Random(2), False, 3.0)
    assert abs(heavy - 3 * light) <= 2  # integer-ns rounding


def test_pareto_distribution_mode():
    model = LatencyModel(distribution="pareto", mean_s=0.2, tail_alpha=2.5)
    rng = random.Random(3)
    draws = [draw_service_ns(model, rng, False, 1.0) for _ in range(20000)]
    mean = sum(draws) / len(draws) / 1e9
    assert abs(mean - 0.2) < 0.03


def test_rate_for_utilization_scales_with_workers():
    cfg = parse_config("front: a:1\nservice: {kind: sharded-search, backWorkers: 2}\n")
    r1 = rate_for_utilization(cfg, 0.5)
    cfg2 = parse_config("front: a:1\nservice: {kind: sharded-search, backWorkers: 4}\n")
    r2 = rate_for_utilization(cfg2, 0.5)
    assert abs(r2 - 2 * r1) < 1e-9
