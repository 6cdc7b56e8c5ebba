"""Benchmark workloads: transactional mixes, graph analytics and reference oracles."""
from .oltp import MIXES, OPS, OltpMix, run_oltp
from .olap import (LocalGraph, add_features, prepare_bi, run_bfs, run_bi, run_cdlp, run_gcn,
                   run_khop, run_lcc, run_pagerank, run_wcc)

__all__ = [
    "MIXES", "OPS", "OltpMix", "run_oltp", "LocalGraph", "add_features", "prepare_bi",
    "run_bfs", "run_bi", "run_cdlp", "run_gcn", "run_khop", "run_lcc", "run_pagerank", "run_wcc",
]
