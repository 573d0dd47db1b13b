"""Regenerate the frozen reference outputs under tests/golden.

Run once after an intentional numerical change, then review the diff:

    python scripts/make_golden.py
"""

from pathlib import Path

import numpy as np

from congrobust import features, oracle, predictor, tensorio
from congrobust.layout import synth_layout

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"


def golden_input():
    # fixed 16 x 16 feature map of a small synthetic layout
    return features.feature_map(synth_layout(0, n_cells=300, n_nets=420, W=16, H=16, n_macros=1)).stack()


def golden_gcn_layout():
    return synth_layout(1, n_cells=120, n_nets=160, W=8, H=8)


def golden_oracle_layout():
    return synth_layout(7, n_cells=2000, n_nets=3000, W=32, H=32)


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    m = golden_input()
    tensorio.save(GOLDEN / "fcn_input.ten", m)
    tensorio.save(GOLDEN / "fcn_seed0.ten", predictor.FCN.init(0).forward(m)[0])
    tensorio.save(GOLDEN / "gcn_seed0.ten", predictor.gcn_forward(golden_gcn_layout(), predictor.GCN.init(0)))
    dm = oracle.demand_map(golden_oracle_layout(), capacity=1.0)
    tensorio.save(GOLDEN / "oracle_seed7_h.ten", dm.h_demand)
    tensorio.save(GOLDEN / "oracle_seed7_v.ten", dm.v_demand)
    for p in sorted(GOLDEN.glob("*.ten")):
        print(p.name, tensorio.load(p).shape)


if __name__ == "__main__":
    main()
