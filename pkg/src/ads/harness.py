"""Experiment runners shared by the command line and the acceptance suite.

A run is: generate (or load) the three splits, contrastively pretrain one
backbone, then for each (variant, seed) copy the backbone, freeze it, train
the variant's trainable set and evaluate on the test split.
"""

from __future__ import annotations

import copy
import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import tensor as T
from .backbone import DualEncoder, contrastive_pretrain
from .config import VARIANTS, ModelConfig, RunConfig, TrainConfig, GenSpec
from .data import Dataset, generate, generate_pretrain_pairs
from .model import AdsModel, ForwardTrace
from .training import (count_trainable_params, evaluate, freeze_backbone, frozen_digest, train,
                       EpochLog)

RESULT_FIELDS = ("variant", "layers", "seed", "accuracy", "precision", "recall", "f1", "trainable_params")
TIMING_FIELDS = ("variant", "layers", "seed", "seconds")
ABLATION_VARIANTS = ("ADS", "NO_SHARING", "V2T", "NO_ADAPTERS")
PEFT_VARIANTS = ("ADS", "NO_SHARING", "LORA", "PROMPT")


@dataclass(frozen=True)
class ResultRow:
    variant: str
    layers: str
    seed: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    trainable_params: int

    def csv(self) -> str:
        return (f"{self.variant},{self.layers},{self.seed},{self.accuracy:.6f},{self.precision:.6f},"
                f"{self.recall:.6f},{self.f1:.6f},{self.trainable_params}")


@dataclass
class RunOutcome:
    row: ResultRow
    seconds: float
    history: list[EpochLog] = field(default_factory=list)
    digest_before: str = ""
    digest_after: str = ""
    model: AdsModel | None = None


def layer_span(cfg: ModelConfig, variant: str) -> str:
    if variant in ("ADS", "V2T", "NO_SHARING"):
        return f"{cfg.K}-{cfg.L}"
    if variant == "LORA":
        return f"1-{cfg.L}"
    return "-"


# ---------------------------------------------------------------------------
# results files
# ---------------------------------------------------------------------------

def write_results(path, rows: list[ResultRow], append: bool = False) -> None:
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as fh:
        if not exists:
            fh.write(",".join(RESULT_FIELDS) + "\n")
        for r in rows:
            fh.write(r.csv() + "\n")


def read_results(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [ResultRow(r["variant"], r["layers"], int(r["seed"]), float(r["accuracy"]),
                          float(r["precision"]), float(r["recall"]), float(r["f1"]),
                          int(r["trainable_params"])) for r in reader]


def write_timings(path, outcomes: list[RunOutcome], append: bool = False) -> None:
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w") as fh:
        if not exists:
            fh.write(",".join(TIMING_FIELDS) + "\n")
        for o in outcomes:
            fh.write(f"{o.row.variant},{o.row.layers},{o.row.seed},{o.seconds:.3f}\n")


def summarize(rows: list[ResultRow]) -> str:
    """Mean and spread per (variant, layers) in first-seen order."""
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.variant, r.layers), []).append(r)
    out = io.StringIO()
    out.write(f"{'variant':<12} {'layers':>6} {'n':>3} {'acc':>8} {'±':>6} {'f1':>8} {'params':>9}\n")
    for (variant, layers), rs in groups.items():
        acc = np.array([r.accuracy for r in rs])
        f1 = np.mean([r.f1 for r in rs])
        out.write(f"{variant:<12} {layers:>6} {len(rs):>3} {100 * acc.mean():8.2f} {100 * acc.std():6.2f} "
                  f"{100 * f1:8.2f} {rs[0].trainable_params:>9}\n")
    return out.getvalue()


def mean_accuracy(rows: list[ResultRow]) -> dict[str, float]:
    acc: dict[str, list[float]] = {}
    for r in rows:
        acc.setdefault(r.variant, []).append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------

def make_splits(spec: GenSpec) -> tuple[Dataset, Dataset, Dataset]:
    return generate(spec)


def pretrain_backbone(rc: RunConfig) -> tuple[DualEncoder, list[float]]:
    """Fresh backbone (seeded by ``pretrain.seed``) trained on caption-style pairs."""
    pc = rc.pretrain
    with T.precision(rc.model.dtype):
        backbone = DualEncoder(rc.model, T.make_rng(pc.seed, "backbone"))
        pairs = generate_pretrain_pairs(rc.data, pc.pairs, pc.seed)
        losses = contrastive_pretrain(backbone, pairs.patches, pairs.tokens, pc.steps,
                                      temperature=pc.temperature, batch_size=pc.batch_size,
                                      learning_rate=pc.learning_rate, seed=pc.seed)
    return backbone, losses


def run_variant(backbone: DualEncoder, splits, rc: RunConfig, variant: str, seed: int,
                K: int | None = None, keep_model: bool = False) -> RunOutcome:
    """Train one variant on a private copy of ``backbone`` and evaluate on test."""
    train_ds, val_ds, test_ds = splits
    mc = rc.model.replace(seed=seed, **({} if K is None else {"K": K}))
    tc = TrainConfig(epochs=rc.train.epochs, batch_size=rc.train.batch_size,
                     learning_rate=rc.train.learning_rate, seed=seed, variant=variant).validate()
    start = time.perf_counter()
    with T.precision(mc.dtype):
        model = AdsModel(copy.deepcopy(backbone), variant, mc)
        freeze_backbone(model)
        before = frozen_digest(model)
        model, history = train(model, train_ds, val_ds, tc)
        metrics = evaluate(model, test_ds)
        after = frozen_digest(model)
    seconds = time.perf_counter() - start
    row = ResultRow(variant, layer_span(mc, variant), seed, *metrics.as_row(), count_trainable_params(model))
    return RunOutcome(row, seconds, history, before, after, model if keep_model else None)


def _run_job(args):
    backbone, splits, rc, variant, seed, K = args
    return run_variant(backbone, splits, rc, variant, seed, K)


def worker_count(requested: int) -> int:
    """Requested parallelism, capped by the ADS_THREADS environment variable."""
    cap = os.environ.get("ADS_THREADS")
    n = max(1, int(requested))
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def run_jobs(backbone, splits, rc: RunConfig, jobs: list[tuple[str, int, int | None]],
             workers: int = 1) -> list[RunOutcome]:
    """Run ``(variant, seed, K)`` jobs; results come back in job order either way."""
    payload = [(backbone, splits, rc, v, s, k) for v, s, k in jobs]
    workers = min(worker_count(workers), len(payload)) if payload else 1
    if workers <= 1:
        return [_run_job(p) for p in payload]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, payload))


# ---------------------------------------------------------------------------
# linear probes
# ---------------------------------------------------------------------------

def pooled_features(backbone: DualEncoder, ds: Dataset, batch: int = 250) -> tuple[np.ndarray, np.ndarray]:
    """Final-layer pooled states (after the final layernorm, before projection)."""
    ft, fv = [], []
    with T.no_grad():
        for s in range(0, len(ds), batch):
            xt = backbone.text.embed(ds.tokens[s:s + batch])
            xv = backbone.vision.embed(ds.patches[s:s + batch])
            for blk in backbone.text.blocks:
                xt = blk(xt)
            for blk in backbone.vision.blocks:
                xv = blk(xv)
            ft.append(backbone.text.ln_final(xt[:, -1, :]).data)
            fv.append(backbone.vision.ln_final(xv[:, 0, :]).data)
    return np.concatenate(ft).astype(np.float64), np.concatenate(fv).astype(np.float64)


def logistic_probe(x_train, y_train, x_test, y_test, l2: float = 1e-3) -> float:
    """Test accuracy of an L2-regularized logistic regression (L-BFGS)."""
    mu, sd = x_train.mean(0), x_train.std(0) + 1e-8
    a = np.hstack([(x_train - mu) / sd, np.ones((len(x_train), 1))])
    b = np.hstack([(x_test - mu) / sd, np.ones((len(x_test), 1))])
    y = np.asarray(y_train, dtype=np.float64)

    def loss(w):
        z = a @ w
        # log(1 + e^z) - y z, computed stably
        val = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w[:-1] @ w[:-1]
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        grad = a.T @ (p - y) / len(y)
        grad[:-1] += l2 * w[:-1]
        return val, grad

    w = minimize(loss, np.zeros(a.shape[1]), jac=True, method="L-BFGS-B", options={"maxiter": 500}).x
    return float(np.mean((b @ w > 0).astype(int) == np.asarray(y_test)))


def unimodal_probes(backbone: DualEncoder, train_ds: Dataset, test_ds: Dataset) -> dict[str, float]:
    """Text-only, image-only and concatenated linear probes on frozen features."""
    tt, tv = pooled_features(backbone, train_ds)
    et, ev = pooled_features(backbone, test_ds)
    return {
        "text": logistic_probe(tt, train_ds.labels, et, test_ds.labels),
        "image": logistic_probe(tv, train_ds.labels, ev, test_ds.labels),
        "concat": logistic_probe(np.hstack([tt, tv]), train_ds.labels, np.hstack([et, ev]), test_ds.labels),
    }


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]          # "VARIANT:tensor" -> max relative error
    tolerance: float

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return self.worst[1] < self.tolerance

    def lines(self) -> list[str]:
        return [f"{name},{err:.3e}" for name, err in self.errors.items()]


def grad_check(cfg: ModelConfig, variants=VARIANTS, batch: int = 3, entries: int = 4, h: float = 1e-5,
               floor: float = 1e-6, tolerance: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences for every trainable tensor.

    Runs in 64-bit mode.  Zero-initialized tensors (adapter up-projections,
    LoRA ``B``, biases) are re-drawn at small random values first: at exactly
    zero several analytic gradients vanish identically, which would make the
    comparison vacuous.  ``entries`` random coordinates per tensor are probed,
    plus the coordinate with the largest analytic gradient.
    """
    errors: dict[str, float] = {}
    with T.precision("float64"):
        cfg = cfg.replace(dtype="float64")
        spec = GenSpec(m=cfg.m, n=cfg.n, patch_dim=cfg.patch_dim, vocab_size=cfg.vocab_size,
                       regions=1, n_polar_tokens=1, n_train=batch, n_val=1, n_test=1, seed=seed)
        ds = generate(spec)[0]
        labels = ds.labels
        for variant in variants:
            rng = T.make_rng(seed, "grad-check", variant)
            model = AdsModel(DualEncoder(cfg, T.make_rng(seed, "grad-check-backbone")), variant, cfg)
            freeze_backbone(model)
            params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
            for _, p in params:
                p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)

            def loss_value():
                with T.no_grad():
                    return float(T.cross_entropy_logits(model(ds.tokens, ds.patches), labels).data)

            T.backward(T.cross_entropy_logits(model(ds.tokens, ds.patches), labels))
            grads = {n: p.grad.copy() for n, p in params}
            for _, p in params:
                p.grad = None
            for name, p in params:
                g = grads[name].reshape(-1)
                flat = p.data.reshape(-1)
                picks = set(rng.choice(flat.size, size=min(entries, flat.size), replace=False).tolist())
                picks.add(int(np.argmax(np.abs(g))))
                worst = 0.0
                for i in sorted(picks):
                    old = flat[i]
                    flat[i] = old + h
                    fp = loss_value()
                    flat[i] = old - h
                    fm = loss_value()
                    flat[i] = old
                    num = (fp - fm) / (2 * h)
                    err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
                    worst = max(worst, err)
                errors[f"{variant}:{name}"] = worst
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# inspection
# ---------------------------------------------------------------------------

def inspect_rows(model: AdsModel, ds: Dataset, indices) -> tuple[list[str], list[str]]:
    """CSV lines for sharing attention rows and mean adapter-output norms.

    Returns ``(attention_lines, norm_lines)``, each starting with a header.
    ``attention_lines`` is empty when the model shares no states.
    """
    idx = np.asarray(list(indices), dtype=np.int64)
    trace = ForwardTrace()
    with T.no_grad(), T.precision(model.cfg.dtype):
        model(ds.tokens[idx], ds.patches[idx], trace=trace)
    att_lines = []
    if trace.attention:
        q = model.cfg.queue_len
        att_lines.append("sample,layer," + ",".join(f"att_{j}" for j in model.cfg.adapted_layers))
        for layer in sorted(trace.attention):
            att = trace.attention[layer]
            assert att.shape[1] == q
            for row, sample in zip(att, idx):
                att_lines.append(f"{sample},{layer}," + ",".join(f"{v:.9g}" for v in row))
    norm_lines = ["sample,tower,layer,adapter_norm"]
    for tower, norms in (("text", trace.text_adapter_norms), ("vision", trace.vision_adapter_norms)):
        for layer in sorted(norms):
            for value, sample in zip(norms[layer], idx):
                norm_lines.append(f"{sample},{tower},{layer},{value:.9g}")
    return att_lines, norm_lines
