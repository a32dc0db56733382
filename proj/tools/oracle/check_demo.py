"""Independent cross-check of the demo run with scikit-learn and shap.

Usage: python check_demo.py <run_dir>

Needs numpy, scikit-learn and shap. Not part of the ctest suite.
"""
import struct
import sys
from pathlib import Path

import numpy as np
import shap
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import GridSearchCV, StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler


def load_tsv(path):
    lines = Path(path).read_text().split("\n")
    names = lines[0].split("\t")[:-1]
    rows = [line.split("\t") for line in lines[1:]]
    x = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([int(r[-1]) for r in rows])
    return names, x, y


def read_blob(path):
    """Logistic pipeline (standardize only) from a version-1 model blob."""
    b = Path(path).read_bytes()
    pos = 5 + 4

    def u64():
        nonlocal pos
        v = struct.unpack_from("<Q", b, pos)[0]
        pos += 8
        return v

    def text():
        nonlocal pos
        n = u64()
        s = b[pos:pos + n].decode()
        pos += n
        return s

    def vec(n):
        nonlocal pos
        v = np.frombuffer(b, "<f8", n, pos).copy()
        pos += 8 * n
        return v

    text()
    text()
    d = u64()
    count = struct.unpack_from("<I", b, pos)[0]
    pos += 4
    steps = []
    for _ in range(count):
        kind = b[pos]
        pos += 1
        center = vec(u64())
        scale = vec(u64()) if kind == 1 else None
        steps.append((kind, center, scale))
    tag = b[pos]
    pos += 1
    assert tag == 0, "linear model expected"
    w = vec(u64())
    bias = struct.unpack_from("<d", b, pos)[0]
    assert len(w) == d

    def f(x):
        z = np.array(x, dtype=float)
        for kind, center, scale in steps:
            if kind == 0:
                z = np.where(np.isnan(z), center, z)
            else:
                z = (z - center) / scale
        return 1.0 / (1.0 + np.exp(-(z @ w + bias)))

    return f


def main(run_dir):
    run = Path(run_dir)
    names, xtr, ytr = load_tsv(run / "data" / "train.tsv")
    _, xte, yte = load_tsv(run / "data" / "test.tsv")

    # Mean log-loss + l2/2 |w|^2 corresponds to C = 1 / (n l2).
    n_fit = len(ytr) * 4 // 5
    grid = {"logisticregression__C": [1.0 / (n_fit * l2) for l2 in (1e-4, 1e-2, 1.0)]}
    search = GridSearchCV(make_pipeline(StandardScaler(), LogisticRegression(max_iter=10000)), grid,
                          cv=StratifiedKFold(5, shuffle=True, random_state=0), scoring="roc_auc")
    search.fit(xtr, ytr)
    print("sklearn held-out accuracy:", (search.predict(xte) == yte).mean())

    rng = np.random.default_rng(0)
    accs = []
    for _ in range(200):
        x = rng.standard_normal((400, 10))
        y = (x[:, :3].sum(1) + rng.normal(0, 0.25, 400) > 0).astype(int)
        model = make_pipeline(StandardScaler(), LogisticRegression(C=1.0 / (320 * 1e-4), max_iter=10000))
        model.fit(x[:320], y[:320])
        accs.append((model.predict(x[320:]) == y[320:]).mean())
    print("sklearn accuracy over 200 generator draws: mean %.4f, 5%% quantile %.4f"
          % (np.mean(accs), np.quantile(accs, 0.05)))
    s = rng.standard_normal((2_000_000, 3)).sum(1)
    eps = rng.normal(0, 0.25, s.size)
    print("Bayes accuracy, noise std 0.25: %.4f" % np.mean((s > 0) == (s + eps > 0)))
    eps = rng.normal(0, 0.5, s.size)
    print("Bayes accuracy, noise std 0.5 : %.4f" % np.mean((s > 0) == (s + eps > 0)))

    f = read_blob(run / "model.xmlwf")
    pred = (f(xte) >= 0.5).astype(int)
    print("logged model held-out accuracy:", (pred == yte).mean())
    background = xtr[np.random.default_rng(1).choice(len(xtr), 100, replace=False)]
    explainer = shap.KernelExplainer(f, background)
    phi = explainer.shap_values(xte, nsamples=2046, silent=True)
    correct = pred == yte
    med = np.median(np.abs(phi[correct]), axis=0)
    order = np.argsort(-med)
    print("shap median |phi| top-3:", [names[i] for i in order[:3]])
    print("shap medians:", dict(zip(names, np.round(med, 5))))


if __name__ == "__main__":
    main(sys.argv[1])
