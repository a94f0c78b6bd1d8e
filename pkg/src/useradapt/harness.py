"""Experiment orchestration: population pretraining, per-user online
adaptation for every method, grid selection on tuning users and reports."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import analysis
from .learner import AdaptationError, LwpState, OptimConfig, adapt_stream, pretrain
from .metrics import (EvalLog, Evaluation, aggregate, aggregate_reports, bin_rf, evaluate,
                      evaluate_stream, RfLog, user_report)
from .model import ModelParams, load_checkpoint, save_checkpoint
from .replay import ReplayMemory
from .stream import (LEVELS, StreamCollection, UserStream, correlation_mask, load_streams,
                     make_stream)
from .synth import SynthConfig, derive_seed, gen_collection

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("Random", "LWP", "LWP_B", "SGD", "SGD-head-only", "SGD-feat-only", "SGD-iid",
           "ER-FIFO", "ER-Reservoir", "ER-HybridCBRS", "ER-Full")
LEARNERS = tuple(m for m in METHODS if m.startswith(("SGD", "ER")))
SCOPE_OF = {"SGD-head-only": "H", "SGD-feat-only": "F"}
ANALYSES = ("curves", "lwp", "finetune", "multi_update", "replay", "probe", "transfer", "grads", "norms")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# -- configuration ---------------------------------------------------------

@dataclass
class DataConfig:
    synthetic: SynthConfig | None = field(default_factory=SynthConfig)
    n_population: int = 20
    n_train: int = 10
    n_test: int = 40
    disjoint: bool = False
    jsonl: str | None = None
    batch_size: int = 4


@dataclass
class PretrainConfig:
    enabled: bool = True
    checkpoint: str | None = None
    epochs: int = 20
    lr: float = 0.05
    holdout_frac: float = 0.1
    hidden: int = 32
    batch_size: int = 32
    activation: str = "linear"


@dataclass
class GridConfig:
    lr: list[float] = field(default_factory=lambda: [0.1, 0.01, 0.001])
    momentum: list[float] = field(default_factory=lambda: [0.0])
    nesterov: list[bool] = field(default_factory=lambda: [False])


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    methods: list[str] = field(default_factory=lambda: ["SGD"])
    optim: OptimConfig = field(default_factory=OptimConfig)
    updates: list[int] = field(default_factory=lambda: [1])
    update_grid: list[int] = field(default_factory=lambda: [1, 2, 3, 5, 10])  # multi-update study
    memory_size: int = 64
    window: int | None = 1
    lwp_windows: list = field(default_factory=lambda: [1, 4, 32, None])
    grid_search: bool = False
    grid: GridConfig = field(default_factory=GridConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    probe: analysis.ProbeConfig = field(default_factory=analysis.ProbeConfig)
    analyses: list[str] = field(default_factory=list)
    track_rf: bool = True
    parallel: int = 1
    out_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if not self.methods:
            raise ConfigError("no methods configured")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
        if any(m.startswith("ER") for m in self.methods) and (self.memory_size is None or self.memory_size < 1):
            raise ConfigError("ER methods need memory_size >= 1")
        if self.window is not None and self.window < 1:
            raise ConfigError("window must be >= 1 or null")
        if any(w is not None and w < 1 for w in self.lwp_windows):
            raise ConfigError("lwp_windows entries must be >= 1 or null")
        for name in ("updates", "update_grid"):
            vals = getattr(self, name)
            if not vals or min(vals) < 1:
                raise ConfigError(f"{name} must be a non-empty list of integers >= 1")
        if self.grid_search and not (self.grid.lr and self.grid.momentum and self.grid.nesterov):
            raise ConfigError("grids must be non-empty")
        for a in self.analyses:
            if a not in ANALYSES:
                raise ConfigError(f"unknown analysis {a!r}; expected one of {', '.join(ANALYSES)}")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        if self.data.jsonl is None and self.data.synthetic is None:
            raise ConfigError("data needs either 'synthetic' or 'jsonl'")
        if not self.pretrain.enabled and not self.pretrain.checkpoint:
            raise ConfigError("pretraining disabled but no population checkpoint given")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("parallel")
        d.pop("out_dir")
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            raw = dict(raw)
            data = dict(raw.pop("data", {}))
            if "synthetic" in data and data["synthetic"] is not None:
                data["synthetic"] = SynthConfig(**data["synthetic"])
            elif "jsonl" in data:
                data["synthetic"] = None
            kw = {
                "data": DataConfig(**data),
                "optim": OptimConfig(**raw.pop("optim", {})),
                "grid": GridConfig(**raw.pop("grid", {})),
                "pretrain": PretrainConfig(**raw.pop("pretrain", {})),
                "probe": analysis.ProbeConfig(**raw.pop("probe", {})),
            }
            known = {f.name for f in fields(cls)}
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
            return cls(**raw, **kw).validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default, allow_nan=True)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


# -- data and population ---------------------------------------------------

def build_collection(cfg: ExperimentConfig) -> tuple[StreamCollection, str]:
    """Stream collection and a content digest of the inputs it came from."""
    if cfg.data.jsonl:
        path = Path(cfg.data.jsonl)
        col = load_streams(path, cfg.data.batch_size)
        return col, hashlib.sha256(path.read_bytes()).hexdigest()
    d = cfg.data
    col = gen_collection(d.synthetic, d.n_population, d.n_train, d.n_test, d.disjoint)
    return col, digest({"synthetic": d.synthetic.to_dict(), "n": [d.n_population, d.n_train, d.n_test],
                        "disjoint": d.disjoint})


def population_model(cfg: ExperimentConfig, collection: StreamCollection) -> ModelParams:
    p = cfg.pretrain
    if not p.enabled:
        if not p.checkpoint:
            raise ConfigError("pretraining disabled but no population checkpoint given")
        try:
            return load_checkpoint(p.checkpoint)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load population checkpoint {p.checkpoint}: {exc}") from None
    return pretrain(collection, p.epochs, p.lr, p.holdout_frac, hidden=p.hidden, batch_size=p.batch_size,
                    seed=cfg.seed, activation=p.activation).params


# -- per-user method execution ---------------------------------------------

def run_iid_variant(stream: UserStream, seed) -> UserStream:
    """Uniformly shuffled copy of a stream, re-batched with the same batch size."""
    samples = stream.samples
    if len(samples) <= 1:
        return stream
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(samples))
    return make_stream(stream.user_id, [samples[i] for i in perm], stream.vocab, stream.batch_size)


@dataclass
class UserTask:
    method: str
    stream: UserStream
    pop: ModelParams
    optim: OptimConfig
    memory_size: int
    window: int | None
    seed: int
    track_rf: bool = True
    record_grads: bool = False
    keep_model: bool = False


@dataclass
class UserResult:
    user_id: str
    report: dict
    final: ModelParams | None = None
    curve: np.ndarray | None = None   # cumulative action-loss gain at the end of each batch
    rf: list | None = None            # (gap, rf) pairs
    grads: analysis.GradLog | None = None
    failed: str | None = None


def _log_from_parts(stream: UserStream, adapted: Evaluation, pop: Evaluation) -> EvalLog:
    _, v, n = stream.arrays()
    steps = np.concatenate([np.full(len(b), b.step) for b in stream.batches])
    return EvalLog(v.copy(), n.copy(), steps, correlation_mask(stream), adapted, pop)


def _nan_eval(vp, np_) -> Evaluation:
    nan = np.full(len(vp), np.nan)
    return Evaluation(np.asarray(vp, dtype=np.int64), np.asarray(np_, dtype=np.int64), nan, nan.copy())


def _random_user(task: UserTask, rng) -> UserResult:
    stream, vocab = task.stream, task.stream.vocab
    x, v, n = stream.arrays()
    k = len(v)
    uniform = Evaluation(rng.integers(vocab.num_verbs, size=k), rng.integers(vocab.num_nouns, size=k),
                         np.full(k, math.log(vocab.num_verbs)), np.full(k, math.log(vocab.num_nouns)))
    hind = Evaluation(rng.integers(vocab.num_verbs, size=k), rng.integers(vocab.num_nouns, size=k),
                      uniform.loss_verb.copy(), uniform.loss_noun.copy())
    pop_eval = evaluate(task.pop, x, v, n)
    elog = _log_from_parts(stream, uniform, pop_eval)
    return UserResult(stream.user_id, user_report(elog, hind, pop_eval, None))


def _lwp_user(task: UserTask) -> UserResult:
    stream = task.stream
    x, v, n = stream.arrays()
    state = LwpState(task.window)
    vp, np_ = [], []
    for batch in stream.batches:
        if task.method == "LWP_B":
            pv, pn = state.predict_pair()
            vp += [pv] * len(batch)
            np_ += [pn] * len(batch)
            state.update(s.label for s in batch.samples)
        else:
            for s in batch.samples:
                pv, pn = state.predict_pair()
                vp.append(pv)
                np_.append(pn)
                state.update([s.label])
    pv, pn = state.predict_pair()
    pop_eval = evaluate(task.pop, x, v, n)
    elog = _log_from_parts(stream, _nan_eval(vp, np_), pop_eval)
    return UserResult(stream.user_id, user_report(elog, _nan_eval([pv] * len(v), [pn] * len(v)), pop_eval, None))


def run_user(task: UserTask) -> UserResult:
    """Run one method on one user stream and score it."""
    rng = np.random.default_rng(task.seed)
    if task.method == "Random":
        return _random_user(task, rng)
    if task.method in ("LWP", "LWP_B"):
        return _lwp_user(task)

    stream = task.stream
    if task.method == "SGD-iid":
        stream = run_iid_variant(stream, rng.integers(2 ** 63))
    optim = replace(task.optim, scope=SCOPE_OF.get(task.method, task.optim.scope))
    memory = None
    if task.method.startswith("ER-"):
        memory = ReplayMemory(task.method[3:], task.memory_size, rng=rng)
    try:
        res = adapt_stream(task.pop, stream, optim, memory, task.pop, track_rf=task.track_rf,
                           record_grads=task.record_grads)
    except AdaptationError as exc:
        log.warning("%s diverged on user %s: %s", task.method, stream.user_id, exc)
        return UserResult(stream.user_id, {}, failed=str(exc))
    final_eval = evaluate_stream(res.final, stream)
    pop_eval = evaluate_stream(task.pop, stream)
    report = user_report(res.log, final_eval, pop_eval, res.rf)
    gain = res.log.population.losses("action") - res.log.adapted.losses("action")
    ends = np.cumsum([len(b) for b in stream.batches]) - 1
    curve = np.cumsum(gain)[ends]
    rf = [(ev.gap, ev.rf) for ev in res.rf.events] if res.rf is not None else None
    return UserResult(stream.user_id, report, res.final if task.keep_model else None, curve, rf, res.grads)


def map_users(tasks: list[UserTask], parallel: int) -> list[UserResult]:
    """Run tasks, preserving order; results do not depend on ``parallel``."""
    if parallel <= 1 or len(tasks) <= 1:
        return [run_user(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(run_user, tasks, chunksize=max(1, len(tasks) // (4 * parallel))))


def user_seed(seed: int, user_id: str, *tags) -> int:
    return int(derive_seed(seed, user_id, *tags).generate_state(1, np.uint64)[0])


# -- experiment ------------------------------------------------------------

@dataclass
class Candidate:
    lr: float
    momentum: float
    nesterov: bool

    def key(self):
        return (self.lr, self.momentum, self.nesterov)


def candidates(cfg: ExperimentConfig) -> list[Candidate]:
    if not cfg.grid_search:
        o = cfg.optim
        return [Candidate(o.lr, o.momentum, o.nesterov)]
    out = []
    for lr, mom, nest in itertools.product(cfg.grid.lr, cfg.grid.momentum, cfg.grid.nesterov):
        if mom == 0 and nest:
            continue  # identical to plain SGD
        out.append(Candidate(lr, mom, nest))
    return out


def select(scores: list[tuple[Candidate, float]]) -> Candidate:
    """Highest score; ties go to the lowest lr, then the lowest momentum, then plain momentum."""
    finite = [(c, s) for c, s in scores if not math.isnan(s)]
    if not finite:
        raise AdaptationError("every grid configuration diverged")
    best = max(s for _, s in finite)
    tied = [c for c, s in finite if s == best]
    return min(tied, key=lambda c: (c.lr, c.momentum, c.nesterov))


def _tasks(cfg, method, streams, pop, optim, tag, window=None, **flags):
    return [UserTask(method, s, pop, optim, cfg.memory_size, window,
                     user_seed(cfg.seed, s.user_id, method, optim.updates_per_batch, tag),
                     track_rf=cfg.track_rf, **flags) for s in streams]


def _summarize(results: list[UserResult]) -> tuple[dict, dict, list]:
    failed = [r.user_id for r in results if r.failed]
    users = {r.user_id: r.report for r in results if not r.failed}
    agg = aggregate_reports(list(users.values())) if users else {}
    return users, agg, failed


def run_experiment(cfg: ExperimentConfig, collection: StreamCollection | None = None,
                   pop: ModelParams | None = None) -> dict:
    """Two-phase protocol: population model first, then every method on every user.

    Returns the run record as a plain dict. With grid search the winner per
    (method, updates) is chosen on the tuning users by aggregate action OAG
    and reported on the evaluation users.
    """
    cfg.validate()
    t0 = time.perf_counter()
    if collection is None:
        collection, input_digest = build_collection(cfg)
    else:
        input_digest = digest([[s.user_id, s.arrays()[0], s.arrays()[1], s.arrays()[2]]
                               for s in collection.all_streams()])
    if pop is None:
        pop = population_model(cfg, collection)
    tuning, evaluation = list(collection.train_users), list(collection.test_users)
    if not evaluation:
        evaluation = tuning
    if not evaluation:
        raise ConfigError("no evaluation users")

    analyses = set(cfg.analyses)
    rows, extras = [], {}
    for method in cfg.methods:
        updates = [1]
        if method in LEARNERS:
            updates = cfg.update_grid if "multi_update" in analyses else cfg.updates
        windows = [None]
        if method.startswith("LWP"):
            windows = list(cfg.lwp_windows) if "lwp" in analyses else [cfg.window]
        for u, window in itertools.product(updates, windows):
            base = replace(cfg.optim, updates_per_batch=u)
            row = {"method": method, "updates": u, "memory": cfg.memory_size if method.startswith("ER") else None,
                   "window": window if method.startswith("LWP") else None,
                   "scope": SCOPE_OF.get(method, base.scope) if method in LEARNERS else None}
            chosen = base
            if method in LEARNERS:
                cands = candidates(cfg)
                if len(cands) > 1:
                    scores = []
                    for c in cands:
                        o = replace(base, lr=c.lr, momentum=c.momentum, nesterov=c.nesterov)
                        res = map_users(_tasks(cfg, method, tuning, pop, o, "tune"), cfg.parallel)
                        _, agg, failed = _summarize(res)
                        score = agg["oag_action"]["mean"] if agg and not failed else float("nan")
                        scores.append((c, score))
                    best = select(scores)
                    row["tuning"] = [{"lr": c.lr, "momentum": c.momentum, "nesterov": c.nesterov,
                                      "oag_action": s} for c, s in scores]
                    chosen = replace(base, lr=best.lr, momentum=best.momentum, nesterov=best.nesterov)
                row["selected"] = {"lr": chosen.lr, "momentum": chosen.momentum, "nesterov": chosen.nesterov}
            first_learner = method in LEARNERS and not any(r["method"] in LEARNERS for r in rows)
            flags = {"record_grads": "grads" in analyses and first_learner,
                     "keep_model": bool(analyses & {"probe", "transfer", "norms"}) and method in LEARNERS}
            results = map_users(_tasks(cfg, method, evaluation, pop, chosen, "eval", window, **flags),
                                cfg.parallel)
            users, agg, failed = _summarize(results)
            row.update(users=users, aggregate=agg, failed=failed)
            _row_analyses(cfg, row, results, evaluation, pop, first_learner, analyses, extras)
            rows.append(row)

    record = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_hash": digest(cfg.to_dict()),
        "input_digest": input_digest,
        "population_digest": pop.digest(),
        "seed": cfg.seed,
        "rows": rows,
        "analyses": extras,
    }
    record["wall_clock"] = time.perf_counter() - t0
    return record


def _row_analyses(cfg, row, results, streams, pop, first_learner, analyses, extras):
    ok = [r for r in results if not r.failed]
    if not ok or row["method"] not in LEARNERS:
        return
    tag = f"{row['method']}@{row['updates']}"
    if "curves" in analyses:
        row["curves"] = {r.user_id: r.curve for r in ok}
        events = [e for r in ok for e in (r.rf or [])]
        if events:
            from .metrics import RfEvent
            rflog = RfLog([RfEvent((0, 0), 0, 0, int(g), float(v)) for g, v in events])
            row["rf_bins"] = bin_rf(rflog, 10)
    by_id = {s.user_id: s for s in streams}
    if "probe" in analyses:
        probes = {r.user_id: analysis.linear_probe(r.final, by_id[r.user_id], cfg.probe) for r in ok}
        row["probe"] = {"users": probes, "aggregate": {
            lvl: dict(zip(("mean", "se"), aggregate([p[lvl] for p in probes.values()]))) for lvl in LEVELS}}
    if first_learner and "transfer" in analyses:
        tm = analysis.transfer_matrix({r.user_id: r.final for r in ok}, [by_id[r.user_id] for r in ok], pop)
        extras["transfer"] = {"method": tag, "user_ids": tm.user_ids, "values": tm.values.tolist()}
    if first_learner and "grads" in analyses:
        extras["grad_cosine"] = {"method": tag, **analysis.grad_cosine([r.grads for r in ok])}
    if first_learner and "norms" in analyses:
        res = {}
        for level in ("verb", "noun"):
            d = analysis.classifier_norm_delta([r.final for r in ok], pop, [by_id[r.user_id] for r in ok], level)
            res[level] = {k: np.asarray(val).tolist() for k, val in d.items()}
        extras["norms"] = {"method": tag, **res}


# -- reports ---------------------------------------------------------------

def summary(record: dict) -> dict:
    """The deterministic part of a run record (everything but timing and curves)."""
    out = {k: v for k, v in record.items() if k != "wall_clock"}
    out["rows"] = [{k: v for k, v in row.items() if k != "curves"} for row in record["rows"]]
    return out


def _clean(obj):
    """NaN -> None and numpy -> builtin, recursively, for strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if math.isnan(f) else f
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def summary_digest(record: dict) -> str:
    return digest(_clean(summary(record)))


def _agg(row, key):
    a = row["aggregate"].get(key)
    return (a["mean"], a["se"]) if a else (float("nan"), float("nan"))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in r])


def _metric_table(rows, keys, lead):
    header = [*lead, *keys, *(f"se_{k}" for k in keys)]
    body = []
    for row in rows:
        vals = [_agg(row, _key(k)) for k in keys]
        body.append([row.get(c) for c in lead] + [m for m, _ in vals] + [s for _, s in vals])
    return header, body


def _key(col: str) -> str:
    # table column name -> report key
    return {"acc_action": "online_acc_action", "acc_verb": "online_acc_verb",
            "acc_noun": "online_acc_noun"}.get(col, col)


FINAL_COLUMNS = ["oag_action", "oag_verb", "oag_noun", "hag_action", "hag_verb", "hag_noun"]


def emit_reports(record: dict, out_dir) -> list[Path]:
    """Write summary.json, the method table and any requested study tables."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    summ = _clean(summary(record))
    summ["summary_digest"] = summary_digest(record)
    p = out / "summary.json"
    p.write_text(json.dumps(summ, indent=2, sort_keys=True))
    written.append(p)
    rows = record["rows"]
    analyses = set(record["config"].get("analyses", []))

    def table(name, header, body):
        path = out / name
        _write_csv(path, header, body)
        written.append(path)

    table("final.csv", *_metric_table(rows, FINAL_COLUMNS, ["method", "updates"]))
    if "lwp" in analyses:
        lwp_rows = [{**r, "window": "all" if r["window"] is None else r["window"]}
                    for r in rows if r["method"] in ("LWP", "LWP_B")]
        table("lwp.csv", *_metric_table(lwp_rows, ["acc_action", "acc_verb", "acc_noun"], ["method", "window"]))
    if "finetune" in analyses:
        ft = [r for r in rows if r["method"] in ("SGD", "SGD-head-only", "SGD-feat-only", "SGD-iid")]
        table("finetune.csv", *_metric_table(ft, FINAL_COLUMNS, ["method", "scope", "updates"]))
    if "multi_update" in analyses:
        keys = ["oag_action", "hag_action", "oag_decor_action", "oag_cor_action"]
        table("multi_update.csv", *_metric_table(rows, keys, ["method", "updates"]))
    if "replay" in analyses:
        rp = [r for r in rows if r["method"].startswith("ER") or r["method"] == "SGD"]
        table("replay.csv", *_metric_table(rp, FINAL_COLUMNS + ["avg_rf"], ["method", "memory", "updates"]))
    if "probe" in analyses:
        body = []
        for r in rows:
            if "probe" in r:
                a = r["probe"]["aggregate"]
                body.append([r["method"], r["updates"], *(a[l]["mean"] for l in LEVELS),
                             *(a[l]["se"] for l in LEVELS)])
        table("probe.csv", ["method", "updates", "acc_action", "acc_verb", "acc_noun",
                            "se_acc_action", "se_acc_verb", "se_acc_noun"], body)
    if "curves" in analyses:
        rf_body, curves = [], {}
        for r in rows:
            for uid, curve in (r.get("curves") or {}).items():
                curves.setdefault(uid, []).extend(
                    [r["method"], r["updates"], i, float(v), 0.0] for i, v in enumerate(curve))
            for b in r.get("rf_bins") or []:
                rf_body.append([r["method"], r["updates"], b["bin"], b["gap_lo"], b["gap_hi"], b["count"],
                                b["mean"], b["se"]])
        for uid, body in curves.items():
            table(f"oag_curve_user_{uid}.csv", ["method", "updates", "step", "value", "se"], body)
        table("rf_bins.csv", ["method", "updates", "bin", "gap_lo", "gap_hi", "count", "value", "se"], rf_body)
    ex = record.get("analyses", {})
    if "transfer" in ex:
        ids = ex["transfer"]["user_ids"]
        table("transfer.csv", ["model\\stream", *ids],
              [[u, *map(float, vals)] for u, vals in zip(ids, ex["transfer"]["values"])])
    if "grad_cosine" in ex:
        body = [[part, r["k"], r["mean"], r["se"], r["users"], r["skipped"]]
                for part in ("full", "F", "H") for r in ex["grad_cosine"][part]]
        table("grad_cosine.csv", ["part", "k", "value", "se", "users", "skipped"], body)
    if "norms" in ex:
        body = []
        for level in ("verb", "noun"):
            d = ex["norms"][level]
            for i, c in enumerate(d["classes"]):
                body.append([level, int(c), d["freq"][i], d["dw_mean"][i], d["dw_se"][i],
                             d["db_mean"][i], d["db_se"][i]])
        table("norms.csv", ["level", "class", "freq", "dw", "se_dw", "db", "se_db"], body)
    return written


def save_record(record: dict, path) -> None:
    rec = _clean({k: v for k, v in record.items()})
    Path(path).write_text(json.dumps(rec, indent=1, sort_keys=True))


def load_record(path) -> dict:
    rec = json.loads(Path(path).read_text())

    def unnull(o):
        if isinstance(o, dict):
            return {k: unnull(v) for k, v in o.items()}
        if isinstance(o, list):
            return [unnull(v) for v in o]
        return float("nan") if o is None else o
    # NaN was stored as null; only metric dictionaries need it back
    for row in rec["rows"]:
        row["aggregate"] = unnull(row["aggregate"])
        row["users"] = unnull(row["users"])
    return rec


def save_population(pop: ModelParams, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(pop, out / "population")
    return out / "population"
