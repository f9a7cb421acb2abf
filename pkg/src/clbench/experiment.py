"""End-to-end runs: train a continuum with a strategy, evaluate, write artifacts."""
from __future__ import annotations

import dataclasses
import gzip
import logging
import urllib.request
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as D
from . import eval as E
from . import nn
from . import strategies as S

log = logging.getLogger(__name__)

SCENARIOS = ("fellowship", "blobs")
OUTPUTS = {"metrics": "metrics.csv", "embedding": "embedding.csv", "scatter": "scatter.svg",
           "checkpoint": "checkpoint.npz", "state": "strategy_state.npz",
           "config": "resolved_config.txt"}


class DataMissingError(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "fellowship"
    setting: str = D.SINGLE_HEAD
    strategy: str = "finetune"
    lam: Optional[float] = None
    lr: float = 2e-3
    epochs_per_task: int = 5
    batch_size: int = 64
    seed: int = 0
    subsample: Optional[int] = 5000
    test_subsample: Optional[int] = 2000
    data_root: str = "data"
    out_dir: Optional[str] = None
    hidden_sizes: Tuple[int, ...] = (256, 256)
    ogd_memory_per_task: int = 100
    ogd_basis_cap: int = 300
    buffer_per_class: int = 100
    blob_tasks: int = 3
    blob_classes_per_task: int = 2
    blob_dim: int = 10
    blob_per_class: int = 200
    tsne_points: int = 200
    tsne_perplexity: float = 30.0
    tsne_iters: int = 1000

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.setting not in D.SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        self.strategy = S.normalize_kind(self.strategy)
        if self.lam is None:
            self.lam = S.DEFAULT_LAMBDA[self.strategy]
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def strategy_config(self) -> S.StrategyConfig:
        return S.StrategyConfig(self.strategy, self.lam, self.ogd_memory_per_task,
                                self.ogd_basis_cap, self.buffer_per_class)

    def replace(self, **changes) -> "ExperimentConfig":
        if "strategy" in changes and "lam" not in changes:
            changes["lam"] = None
        return dataclasses.replace(self, **changes)


# --- configuration files -----------------------------------------------------

def _field_types() -> Dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(ExperimentConfig)}


def parse_value(name: str, raw: str):
    kind = _field_types()[name]
    raw = raw.strip()
    if "Optional" in kind and raw.lower() in ("", "none", "full"):
        return None
    if "Tuple" in kind:
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if "int" in kind:
        return int(raw)
    if "float" in kind:
        return float(raw)
    return raw


def read_config_file(path) -> Dict[str, object]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    known = _field_types()
    out: Dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        key = {"lambda": "lam", "epochs": "epochs_per_task", "out": "out_dir"}.get(key, key)
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = parse_value(key, value)
    return out


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --- seeding -----------------------------------------------------------------

def stream_seed(root: int, name: str, *extra: int) -> int:
    """Independent 32-bit seed for a named random stream."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode()), *extra])
    return int(ss.generate_state(1)[0])


def stream_rng(root: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name, *extra))


# --- scenario construction ---------------------------------------------------

def load_continuum(cfg: ExperimentConfig) -> D.Continuum:
    if cfg.scenario == "blobs":
        return D.synthetic_blobs(cfg.blob_tasks, cfg.blob_classes_per_task, cfg.blob_dim,
                                 cfg.blob_per_class, stream_seed(cfg.seed, "data"), cfg.setting)
    try:
        return D.build_fellowship(cfg.data_root, cfg.setting, cfg.subsample,
                                  stream_seed(cfg.seed, "data"), cfg.test_subsample)
    except FileNotFoundError as exc:
        raise DataMissingError(
            f"{exc}; download the datasets first with `clbench fetch --data-root {cfg.data_root}`"
        ) from exc


def model_config(cfg: ExperimentConfig, input_dim: int) -> nn.MlpConfig:
    return nn.MlpConfig(input_dim, cfg.hidden_sizes, stream_seed(cfg.seed, "init"))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: List[E.MetricsRow]
    model: nn.MlpModel
    strategy: S.Strategy
    paths: Dict[str, Path] = field(default_factory=dict)


def train_continuum(cfg: ExperimentConfig, continuum: D.Continuum,
                    on_epoch: Optional[Callable[[E.MetricsRow], None]] = None) -> ExperimentResult:
    strategy = S.make_strategy(cfg.strategy_config())
    multi = continuum.setting == D.MULTI_HEAD
    offsets = continuum.meta["offsets"]
    buffer_rng = stream_rng(cfg.seed, "buffer")
    consolidate_rng = stream_rng(cfg.seed, "consolidate")
    model: Optional[nn.MlpModel] = None
    rows: List[E.MetricsRow] = []
    step = 0
    for t, task in enumerate(continuum.tasks):
        n_cls = task.spec.n_classes
        if model is None:
            model = nn.init(model_config(cfg, task.train.images.shape[1]), n_cls, multi)
            model.heads[0].class_offset = offsets[0]
        elif multi:
            nn.add_head(model, n_cls, offsets[t], stream_seed(cfg.seed, "head", t))
        else:
            nn.expand_head(model, n_cls, stream_seed(cfg.seed, "head", t))
        head = S.head_for_task(model, t)
        for epoch in range(cfg.epochs_per_task):
            batches = D.iterate_batches(task.train, cfg.batch_size,
                                        stream_seed(cfg.seed, "shuffle", t, epoch), task_label=t)
            for batch in batches:
                batch = strategy.compose_batch(batch, buffer_rng)
                loss, grads = S.batch_gradients(model, batch)
                if not np.isfinite(loss):
                    raise E.NumericError(f"non-finite loss at step {step} (task {t}, epoch {epoch})")
                grads = strategy.regularize_gradient(model, grads)
                nn.sgd_step(model, grads, cfg.lr)
                step += 1
            row = E.evaluate(model, continuum, global_step=step, tasks_trained=t + 1,
                             penalty=strategy.penalty_value(model), strategy=cfg.strategy,
                             seed=cfg.seed)
            rows.append(row)
            log.info("%s/%s task %d epoch %d: acc %.4f", cfg.strategy, continuum.setting,
                     t, epoch, row.test_acc_global)
            if on_epoch is not None:
                on_epoch(row)
        strategy.consolidate(model, task.train, head, task_label=t, rng=consolidate_rng)
    return ExperimentResult(cfg, rows, model, strategy)


def run_experiment(cfg: ExperimentConfig, continuum: Optional[D.Continuum] = None) -> ExperimentResult:
    """Train, evaluate after every epoch and write the run's artifacts to ``out_dir``."""
    if continuum is None:
        continuum = load_continuum(cfg)
    result = train_continuum(cfg, continuum)
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / OUTPUTS[k] for k in ("metrics", "checkpoint", "state", "config")}
        E.write_metrics_csv(result.rows, paths["metrics"])
        nn.save_checkpoint(result.model, paths["checkpoint"])
        S.save_state(result.strategy, paths["state"])
        header = "# resolved configuration"
        if continuum.subsampled:
            header += f" (desk-scale subsample: train {cfg.subsample}, test {cfg.test_subsample} per task)"
        paths["config"].write_text(header + "\n" + format_config(cfg))
        result.paths = paths
    return result


@dataclass
class SuiteResult:
    rows: List[E.MetricsRow]
    results: Dict[Tuple[str, str], ExperimentResult]
    failures: Dict[Tuple[str, str], str]
    path: Optional[Path] = None


def run_suite(cfg: ExperimentConfig, strategies: Sequence[str] = S.KINDS,
              settings: Sequence[str] = D.SETTINGS, keep_lambda: bool = False) -> SuiteResult:
    """Cross product of strategies and settings with a shared seed.

    Each strategy uses its own default importance unless ``keep_lambda``.
    A failing run is recorded and the rest continue.
    """
    rows: List[E.MetricsRow] = []
    results, failures = {}, {}
    continua: Dict[str, D.Continuum] = {}
    for setting in settings:
        for kind in strategies:
            changes = {"strategy": kind, "setting": setting}
            if keep_lambda:
                changes["lam"] = cfg.lam
            if cfg.out_dir is not None:
                changes["out_dir"] = str(Path(cfg.out_dir) / f"{S.normalize_kind(kind)}_{setting}")
            run_cfg = cfg.replace(**changes)
            try:
                if setting not in continua:
                    continua[setting] = load_continuum(run_cfg)
                res = run_experiment(run_cfg, continua[setting])
            except DataMissingError:
                raise
            except Exception as exc:  # noqa: BLE001 - suite keeps going
                log.error("run %s/%s failed: %s", kind, setting, exc)
                failures[(run_cfg.strategy, setting)] = f"{type(exc).__name__}: {exc}"
                continue
            results[(run_cfg.strategy, setting)] = res
            rows.extend(res.rows)
    suite = SuiteResult(rows, results, failures)
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        suite.path = out / "suite_metrics.csv"
        E.write_metrics_csv(rows, suite.path)
        if failures:
            (out / "suite_failures.txt").write_text(
                "".join(f"{k[0]} {k[1]}: {v}\n" for k, v in sorted(failures.items())))
    return suite


# --- t-SNE dump --------------------------------------------------------------

TASK_COLORS = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def scatter_svg(dump: E.EmbeddingDump, size: int = 480, title: str = "") -> str:
    pad = 30
    c = dump.coords
    lo, hi = c.min(axis=0), c.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    px = pad + (c - lo) / span * (size - 2 * pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 40}">',
             f'<rect width="{size}" height="{size + 40}" fill="white"/>']
    if title:
        parts.append(f'<text x="{pad}" y="18" font-size="13">{title}</text>')
    for (x, y), t in zip(px, dump.task_labels):
        color = TASK_COLORS[int(t) % len(TASK_COLORS)]
        parts.append(f'<circle cx="{x:.2f}" cy="{size - y + 20:.2f}" r="3" fill="{color}"/>')
    for i, t in enumerate(np.unique(dump.task_labels)):
        color = TASK_COLORS[int(t) % len(TASK_COLORS)]
        x0 = pad + 90 * i
        parts.append(f'<rect x="{x0}" y="{size + 22}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{x0 + 14}" y="{size + 31}" font-size="11">task {int(t)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def run_tsne(checkpoint, cfg: ExperimentConfig, continuum: Optional[D.Continuum] = None,
             write_svg: bool = True):
    """Embed latents of test points sampled from all tasks; returns ``(dump, TsneResult)``."""
    if continuum is None:
        continuum = load_continuum(cfg)
    input_dim = continuum.tasks[0].train.images.shape[1]
    model = nn.load_checkpoint(checkpoint, expected=model_config(cfg, input_dim))
    lat, tasks, classes = E.sample_latents(model, continuum, cfg.tsne_points,
                                           stream_seed(cfg.seed, "tsne-sample"))
    res = E.tsne(lat, cfg.tsne_perplexity, cfg.tsne_iters, stream_seed(cfg.seed, "tsne"),
                 return_info=True)
    dump = E.EmbeddingDump(res.coords, tasks, classes)
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        E.write_embedding_csv(dump, out / OUTPUTS["embedding"])
        if write_svg:
            (out / OUTPUTS["scatter"]).write_text(
                scatter_svg(dump, title=f"{cfg.strategy} / {cfg.setting}"))
    return dump, res


# --- dataset download --------------------------------------------------------

MIRRORS = {
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "fashion": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
    "kmnist": "http://codh.rois.ac.jp/kmnist/dataset/kmnist/",
}
EXPECTED_COUNTS = {"train": 60000, "test": 10000}


class FetchError(OSError):
    pass


def _default_opener(url: str) -> bytes:
    with urllib.request.urlopen(url, timeout=60) as resp:  # noqa: S310 - fixed https/http mirrors
        return resp.read()


def _valid(path: Path, split: str, kind: str) -> bool:
    try:
        arr = D.read_idx_file(path)
    except (D.IdxFormatError, OSError):
        return False
    return arr.dims[0] == EXPECTED_COUNTS[split] and (kind == "labels") == (len(arr.dims) == 1)


def fetch_datasets(data_root, mirror_url_overrides: Optional[Dict[str, str]] = None,
                   opener: Callable[[str], bytes] = _default_opener) -> List[Path]:
    """Download the six IDX pairs into ``data_root/<name>/``; already valid files are kept."""
    mirrors = dict(MIRRORS)
    mirrors.update(mirror_url_overrides or {})
    fetched = []
    for name in D.FELLOWSHIP:
        for split in ("train", "test"):
            for kind in ("images", "labels"):
                suffix = "idx3" if kind == "images" else "idx1"
                fname = f"{D.SPLIT_PREFIX[split]}-{kind}-{suffix}-ubyte.gz"
                path = Path(data_root) / name / fname
                if path.exists() and _valid(path, split, kind):
                    continue
                url = mirrors[name].rstrip("/") + "/" + fname
                try:
                    blob = opener(url)
                except Exception as exc:  # noqa: BLE001
                    raise FetchError(f"download failed for {url}: {exc}") from exc
                path.parent.mkdir(parents=True, exist_ok=True)
                if blob[:2] != b"\x1f\x8b":
                    blob = gzip.compress(blob)
                path.write_bytes(blob)
                if not _valid(path, split, kind):
                    path.unlink()
                    raise D.IdxFormatError(f"downloaded file {path} does not parse as a "
                                           f"{EXPECTED_COUNTS[split]}-item {kind} file")
                fetched.append(path)
    return fetched
