"""End-to-end glue: dataset -> autoencoders -> score network -> samples -> metrics.

Every random stream is derived from ``(cfg.seed, tag)`` so each stage is
reproducible on its own, whichever order the stages are run in.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from .config import RunConfig
from .data import MultiModalDataset, generate_synthetic
from .diffusion import ScoreNetwork, ScoreTrainer, load_score_network
from .errors import ConfigError, ShapeError
from .eval import TinyClassifier, conditional_coherence, fmd, joint_coherence, robustness_scan, train_classifier
from .latent import SubsetPartition, proper_subsets
from .sampler import generate

log = logging.getLogger(__name__)

# stream tags for rng derivation
AE, SCORE, CLASSIFIER, SAMPLE, EVAL, SPLIT = range(6)

EVAL_COLUMNS = ("metric", "modality", "condition_set", "value", "n_samples", "seed")
SCORE_LOG_COLUMNS = ("step", "loss", "omega", "a2_size", "t", "grad_norm")


def stream(seed: int, tag: int, *extra: int):
    return np.random.default_rng([seed, tag, *extra])


def make_dataset(cfg: RunConfig) -> MultiModalDataset:
    ds = generate_synthetic(cfg.synthetic_config())
    if ds.names != cfg.layout().names:
        raise ConfigError("dataset modality names differ from the configured layout")
    return ds


def check_dataset(cfg: RunConfig, ds: MultiModalDataset) -> None:
    layout = cfg.layout()
    if list(ds.names) != list(layout.names):
        raise ConfigError(f"dataset modalities {ds.names} do not match config {list(layout.names)}")
    for spec, x in zip(layout.specs, ds.modalities):
        if x.shape[1] != spec.data_dim:
            raise ShapeError(f"{spec.name}: dataset dim {x.shape[1]} != configured {spec.data_dim}")


def train_test_split(cfg: RunConfig, ds: MultiModalDataset):
    n_test = cfg.data.n_test
    if n_test >= len(ds):
        raise ConfigError(f"data.n_test={n_test} leaves no training data out of {len(ds)}")
    order = stream(cfg.seed, SPLIT).permutation(len(ds))
    return ds.subset(order[n_test:]), ds.subset(order[:n_test])


# --- stage one -------------------------------------------------------------

def ae_path(ae_dir, name: str) -> Path:
    return Path(ae_dir) / f"{name}.mmld"


def train_autoencoders(cfg: RunConfig, train: MultiModalDataset, log_rows: list | None = None) -> ae.JointEncoder:
    """One independent autoencoder per modality; each normalizer is fit on that
    modality's first shuffled batch."""
    c = cfg.autoencoder
    pairs, norms = [], []
    for i, spec in enumerate(cfg.layout().specs):
        x = train.modalities[i]
        seed = int(stream(cfg.seed, AE, i).integers(2**31))

        def record(epoch, loss, name=spec.name):
            if log_rows is not None:
                log_rows.append({"modality": name, "epoch": epoch, "loss": loss})

        pair = ae.train_autoencoder(spec, x, c.epochs, c.lr, seed, c.batch_size, tuple(c.hidden), c.linear, record)
        first = x[stream(cfg.seed, AE, i, 1).permutation(len(x))[:c.batch_size]]
        norms.append(ae.fit_normalizer(pair.encoder, first))
        pairs.append(pair)
        log.info("autoencoder %s: train mse %.4g", spec.name, pair.mse(x))
    return ae.JointEncoder(pairs, norms)


def save_autoencoders(ae_dir, encoder: ae.JointEncoder) -> None:
    Path(ae_dir).mkdir(parents=True, exist_ok=True)
    for pair, norm in zip(encoder.pairs, encoder.normalizers):
        ae.save_autoencoder(ae_path(ae_dir, pair.spec.name), pair, norm)


def load_autoencoders(cfg: RunConfig, ae_dir) -> ae.JointEncoder:
    pairs, norms = [], []
    for spec in cfg.layout().specs:
        pair, norm = ae.load_autoencoder(ae_path(ae_dir, spec.name), spec.name)
        if pair.spec != spec:
            raise ConfigError(f"{spec.name}: checkpoint dims {pair.spec} differ from config {spec}")
        pairs.append(pair)
        norms.append(norm)
    return ae.JointEncoder(pairs, norms)


# --- stage two -------------------------------------------------------------

def train_score(cfg: RunConfig, encoder: ae.JointEncoder, train: MultiModalDataset, mode: str = "multitime",
                d: float | None = None, steps: int | None = None, log_fn=None) -> ScoreTrainer:
    """Minibatch training on the frozen, normalized joint latents."""
    s = cfg.score
    layout = cfg.layout()
    z = encoder.encode(train.modalities)
    rng = stream(cfg.seed, SCORE)
    net = ScoreNetwork.create(layout, cfg.diffusion_config(d), rng, s.width, s.n_blocks, s.embed_dim, s.time_scale)
    trainer = ScoreTrainer(net, s.lr, s.ema_momentum, mode)
    batch = min(s.batch_size, len(z))
    for _ in range(s.steps if steps is None else steps):
        idx = rng.choice(len(z), size=batch, replace=False)
        out = trainer.step(z[idx], rng)
        if log_fn is not None:
            log_fn(out)
        if out.step % 1000 == 0:
            log.info("score step %d loss %.4f", out.step, out.loss)
    return trainer


def score_log_row(out) -> dict:
    return {"step": out.step, "loss": out.loss, "omega": out.omega, "a2_size": out.a2_size,
            "t": out.t, "grad_norm": out.grad_norm}


def load_score(cfg: RunConfig, path) -> tuple[ScoreNetwork, str]:
    return load_score_network(path, cfg.layout(), cfg.diffusion_config(), use_ema=True)


def train_classifiers(cfg: RunConfig, train: MultiModalDataset) -> list[TinyClassifier]:
    c = cfg.classifier
    return [train_classifier(x, train.labels, cfg.data.n_classes, c.epochs, c.lr,
                             int(stream(cfg.seed, CLASSIFIER, i).integers(2**31)), tuple(c.hidden))
            for i, x in enumerate(train.modalities)]


# --- sampling ----------------------------------------------------------------

def check_method(mode: str, method: str, partition: SubsetPartition) -> None:
    """An unconditionally trained network never saw frozen blocks, so it may only
    condition through in-painting."""
    if method not in ("multitime", "inpaint"):
        raise ConfigError(f"unknown sampling method {method!r}")
    if mode == "unconditional" and method == "multitime" and partition.a2:
        raise ConfigError("score network was trained unconditionally; conditional sampling needs --method inpaint")


def sample(cfg: RunConfig, net: ScoreNetwork, mode: str, encoder: ae.JointEncoder, conditioning_data: dict,
           count: int, method: str = "multitime", repaint: bool = False, rng=None):
    """Generate ``count`` joint samples given raw conditioning data per modality index.

    Returns ``(latents (count, D), decoded list per modality)``.
    """
    layout = cfg.layout()
    M = layout.n_modalities
    partition = SubsetPartition.conditioning_on(set(conditioning_data), M)
    check_method(mode, method, partition)
    cond = {i: encoder.encode_one(i, np.atleast_2d(x)) for i, x in conditioning_data.items()}
    for i, z in cond.items():
        if len(z) not in (1, count):
            raise ShapeError(f"{layout.names[i]}: {len(z)} conditioning rows for {count} samples")
    sc = cfg.sampler_config(repaint=repaint)
    rng = stream(cfg.seed, SAMPLE) if rng is None else rng
    z = generate(method, cfg.diffusion_config(), sc, net, layout, partition, cond, count, rng)
    blocks = np.split(z, np.cumsum(layout.dims)[:-1], axis=1)
    return z, [encoder.decode_one(i, b) for i, b in enumerate(blocks)]


# --- evaluation ---------------------------------------------------------------

def _row(metric, modality, condition_set, value, n, seed):
    return {"metric": metric, "modality": modality, "condition_set": condition_set,
            "value": float(value), "n_samples": int(n), "seed": int(seed)}


def condition_label(names, subset) -> str:
    return "+".join(names[i] for i in sorted(subset)) or "none"


def evaluate(cfg: RunConfig, net: ScoreNetwork, mode: str, encoder: ae.JointEncoder,
             classifiers: list[TinyClassifier], test: MultiModalDataset,
             methods=("multitime", "inpaint"), robustness: bool = True) -> list[dict]:
    """Joint coherence and FMD, conditional coherence for every nonempty proper
    conditioning set and method, and the robustness scan, as CSV-ready rows."""
    layout = cfg.layout()
    names, M = list(layout.names), layout.n_modalities
    n, seed = cfg.eval.n_samples, cfg.seed
    rows = []

    _, decoded = sample(cfg, net, mode, encoder, {}, n, "multitime", rng=stream(seed, EVAL, 0))
    rows.append(_row("joint_coherence", "all", "none", joint_coherence(classifiers, decoded), n, seed))
    for i in range(M):
        rows.append(_row("fmd", names[i], "none", fmd(classifiers[i], test.modalities[i], decoded[i]), n, seed))

    for k, a2 in enumerate(proper_subsets(M)):
        pick = stream(seed, EVAL, 1, k).choice(len(test), size=n, replace=len(test) < n)
        labels = test.labels[pick]
        for mi, method in enumerate(methods):
            if mode == "unconditional" and method == "multitime":
                continue
            cond = {i: test.modalities[i][pick] for i in a2}
            _, decoded = sample(cfg, net, mode, encoder, cond, n, method, rng=stream(seed, EVAL, 2, k, mi))
            tag = condition_label(names, a2)
            for i in sorted(set(range(M)) - set(a2)):
                coh = conditional_coherence(classifiers[i], decoded[i], labels)
                rows.append(_row(f"conditional_coherence_{method}", names[i], tag, coh, n, seed))

    if robustness:
        nr = min(cfg.eval.robustness_samples, len(test))
        sub = test.subset(np.arange(nr))
        scan = robustness_scan(encoder, classifiers, sub.modalities, sub.labels, cfg.eval.t_grid,
                               cfg.diffusion_config(), stream(seed, EVAL, 3))
        for t, line in zip(cfg.eval.t_grid, scan):
            for i in range(M):
                rows.append(_row("robustness_coherence", names[i], f"t={t:g}", line[i], nr, seed))
    return rows


def ablate_d(cfg: RunConfig, encoder: ae.JointEncoder, train: MultiModalDataset, test: MultiModalDataset,
             d_list, classifiers=None, steps: int | None = None) -> list[dict]:
    """Retrain the score network for each ``d`` and tabulate its metrics; rows gain a ``d`` column."""
    classifiers = train_classifiers(cfg, train) if classifiers is None else classifiers
    rows = []
    for d in d_list:
        if not 0.0 <= d <= 1.0:
            raise ConfigError(f"d={d} outside [0, 1]")
        trainer = train_score(cfg, encoder, train, "multitime", d=d, steps=steps)
        for r in evaluate(cfg, trainer.ema_network(), "multitime", encoder, classifiers, test,
                          methods=("multitime",), robustness=False):
            rows.append({"d": d, **r})
    return rows


def summarize(rows: list[dict]) -> dict:
    """Mean value per ``(metric)`` plus the minimum conditional coherence per method."""
    out = {}
    for r in rows:
        out.setdefault(r["metric"], []).append(r["value"])
    return {k: (float(np.mean(v)), float(np.min(v))) for k, v in out.items()}
