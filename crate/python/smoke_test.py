"""Smoke test for the pyaminokernel extension.

Build first, either with `maturin develop -m crates/python/Cargo.toml` or
by copying the cdylib next to this script as pyaminokernel.so.
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pyaminokernel as ak


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    b = ak.blosum62()
    check(len(b) == 20 and b[0][0] == 3.9029, "table loads")
    p = ak.marginal()
    bp = [sum(b[i][j] * p[j] for j in range(20)) for i in range(20)]
    check(max(abs(v - 1) for v in bp) < 1e-8, "marginal solves B p = 1")
    check(ak.pd_report(b)["conditionally_pd"], "table is conditionally PD")

    k = ak.StringKernel(beta=0.11387)
    check(abs(k.k3_hat("PKYVKQNTLKLAT", "PKYVKQNTLKLAT") - 1) < 1e-15, "k3_hat diagonal")
    check(k.k3("AR", "A") > 0, "k3 positive")
    seqs = ["PKYVKQNTLKLAT", "GELIGILNAAKVPAD", "FRKYTAFTIPSINNE", "AAYSDQATPLLLSPR"]
    g = k.gram(seqs)
    check(all(g[i][j] == g[j][i] for i in range(4) for j in range(4)), "gram symmetric")
    d = k.dist_rkhs(seqs[0], seqs[1])
    check(abs(d - math.sqrt(2 - 2 * g[0][1])) < 1e-12, "rkhs distance")

    check(abs(ak.normalize_ic50(500.0) - 0.4256) < 5e-5, "psi threshold")
    check(ak.auc([0.9, 0.1, 0.5], [0.8, 0.2, 0.1], 0.4256) == 1.0, "auc")
    check(abs(ak.rmse([1.0, 2.0], [1.0, 4.0]) - math.sqrt(2)) < 1e-15, "rmse")

    y = [0.7, 0.2, 0.5, 0.4]
    c = ak.fit_rls(g, y, 1e-12)
    fitted = ak.predict_rls(g, c)
    check(max(abs(a - b) for a, b in zip(fitted, y)) < 1e-6, "rls interpolates")
    r = ak.loo_residuals(g, y, 1e-3)
    check(len(r) == 4 and all(math.isfinite(v) for v in r), "loo residuals")

    w = ak.owa_weights(10)
    check(abs(sum(w) - 1) < 1e-12 and w == sorted(w), "owa weights")
    dist = [[math.sqrt(max(0.0, 2 - 2 * g[i][j])) for j in range(4)] for i in range(4)]
    for i in range(4):
        dist[i][i] = 0.0
    tree = ak.cluster(["a", "b", "c", "d"], dist)
    check(len(tree.merges) == 3 and len(tree.cut(2)) == 2, "clustering")
    check(tree.newick().endswith(";"), "newick")
    back = ak.ClusterTree.from_json(tree.to_json())
    check(back.merges == tree.merges, "json round trip")

    check(ak.normal_form("GGRFLAAATVQKK") == "RFLAAATVQ", "normal form")
    try:
        ak.normal_form("AAAA")
    except ValueError:
        check(True, "missing markers raise")
    else:
        check(False, "missing markers raise")
    try:
        k.k3("AXB", "A")
    except ValueError:
        check(True, "illegal residue raises")
    else:
        check(False, "illegal residue raises")
    print("smoke test passed")


if __name__ == "__main__":
    main()
