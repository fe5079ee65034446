"""Experiment harness: configuration, evaluation, attack grids and reports.

A run is described by one YAML document with five blocks (``env``, ``agent``,
``defense``, ``attack``, ``eval``).  Every key is listed in the dataclasses
below; anything else is rejected with :class:`ConfigError`.

Evaluation streams are derived from ``(master seed, seed index)`` and shared
by every attack cell, so all cells of one seed see the same goals and start
states.  Uniform noise draws additionally mix in a checksum of the attack
label, which keeps them independent of grid ordering.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import agents, arts, attacks, gcenv
from .attacks import AttackSpec
from .errors import ConfigError
from .simsr import SarConfig

log = logging.getLogger(__name__)

SEED_ENV_VAR = "GCRL_ROBUST_SEED"
GOAL_PROTOCOL = "goals resampled per episode; one stream per (master seed, seed index) shared by all attack cells"


# --- configuration -----------------------------------------------------------


@dataclass
class EnvBlock:
    id: str = "PointReach"
    eta: float = gcenv.ETA
    horizon: int = gcenv.HORIZON
    episodes: int = 1000                # dataset episodes for ``collect``
    random_fraction: float = 0.9
    expert_fraction: float = 0.1
    dataset: str | None = None          # path to an existing dataset


@dataclass
class AgentBlock:
    algo: str = "ddpg"
    encoder_width: int = 256
    hidden: int = 64
    gamma: float = gcenv.GAMMA
    use_bias: bool = True
    normalize: bool = True
    epochs: int = 15
    cycles: int = 10
    batches: int = 20
    batch_size: int = 256
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    tau: float = 0.05
    future_ratio: float = 0.8


@dataclass
class DefenseBlock:
    pipeline: str = "vanilla"
    attack: dict = field(default_factory=lambda: arts.default_augmentation().to_dict())
    mix: str = "mixed"
    sar: dict = field(default_factory=lambda: dataclasses.asdict(SarConfig()))
    sar_weight: float = 1.0
    simsr_lr: float = 1e-3


@dataclass
class AttackBlock:
    grid: str | list = "default"        # "default" or a list of AttackSpec dicts
    eps: float = 0.1
    steps: int = 10
    step_size: float = 0.01
    layer: int = 1
    negative_modes: list = field(default_factory=lambda: list(attacks.NEGATIVE_MODES))
    targets: list = field(default_factory=lambda: list(attacks.TARGETS))
    first_steps: int | None = None      # attack only the first k steps of an episode
    layers: list = field(default_factory=lambda: [1, 2, 3])
    curve: dict = field(default_factory=lambda: AttackSpec().to_dict())


@dataclass
class EvalBlock:
    seeds: int = 5
    episodes: int = 10
    master_seed: int = 0


BLOCKS = {"env": EnvBlock, "agent": AgentBlock, "defense": DefenseBlock,
          "attack": AttackBlock, "eval": EvalBlock}


def _strict(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ExperimentConfig:
    env: EnvBlock = field(default_factory=EnvBlock)
    agent: AgentBlock = field(default_factory=AgentBlock)
    defense: DefenseBlock = field(default_factory=DefenseBlock)
    attack: AttackBlock = field(default_factory=AttackBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)

    @classmethod
    def from_dict(cls, data, environ=None):
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping of blocks")
        unknown = set(data) - set(BLOCKS)
        if unknown:
            raise ConfigError(f"unknown config blocks {sorted(unknown)}")
        cfg = cls(**{k: _strict(c, data.get(k), k) for k, c in BLOCKS.items()})
        environ = os.environ if environ is None else environ
        if environ.get(SEED_ENV_VAR):
            try:
                cfg.eval.master_seed = int(environ[SEED_ENV_VAR])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, environ=None):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data, environ)

    def to_dict(self):
        return {k: dataclasses.asdict(getattr(self, k)) for k in BLOCKS}

    def validate(self):
        try:
            self.make_env()
            self.agent_config()
            self.schedule(0)
            self.pipeline()
            self.grid()
            AttackSpec.from_dict(self.attack.curve)
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval.seeds < 1 or self.eval.episodes < 1:
            raise ConfigError("eval.seeds and eval.episodes must be >= 1")
        if self.env.dataset is not None and not Path(self.env.dataset).is_file():
            raise ConfigError(f"dataset not found: {self.env.dataset}")

    # builders

    def make_env(self):
        if self.env.id not in gcenv.ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.env.id!r}")
        return gcenv.make_env(self.env.id, self.env.eta, self.env.horizon)

    def dataset_mix(self):
        return {"random_fraction": self.env.random_fraction, "expert_fraction": self.env.expert_fraction}

    def agent_config(self):
        a = self.agent
        return agents.AgentConfig(a.algo, a.encoder_width, a.hidden, a.gamma, a.use_bias, normalize=a.normalize)

    def schedule(self, seed):
        a = self.agent
        return agents.Schedule(a.epochs, a.cycles, a.batches, a.batch_size, a.lr_actor, a.lr_critic,
                               a.tau, a.future_ratio, seed)

    def pipeline(self):
        d = dataclasses.asdict(self.defense)
        return arts.compose_defense(self.agent.algo, arts.DefenseConfig.from_dict(d))

    def grid(self):
        a = self.attack
        if a.grid == "default":
            return attacks.default_grid(a.eps, a.steps, a.step_size, a.layer, tuple(a.negative_modes),
                                        tuple(a.targets))
        if not isinstance(a.grid, list):
            raise ConfigError("attack.grid must be 'default' or a list of attack specs")
        return [AttackSpec.from_dict(d) for d in a.grid]

    def seeds(self):
        return [run_seed(self.eval.master_seed, k) for k in range(self.eval.seeds)]


def run_seed(master, index):
    """Integer seed for seed slot ``index`` of a run with ``master`` seed."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


def check_dataset(env, dataset):
    """A dataset must come from ``env`` and have its dimensions."""
    if dataset.env_id != env.name:
        raise ConfigError(f"dataset is for {dataset.env_id}, config asks for {env.name}")
    if dataset.states.shape[-1] != env.dim_state or dataset.goals.shape[-1] != env.dim_goal:
        raise ConfigError("dataset dimensions do not match the environment")


def check_bundle(env, bundle):
    if (bundle.dim_state, bundle.dim_goal, bundle.dim_action) != (env.dim_state, env.dim_goal, env.dim_action):
        raise ConfigError("checkpoint dimensions do not match the environment")


# --- evaluation --------------------------------------------------------------


@dataclass
class Evaluation:
    mean: float
    std: float
    returns: np.ndarray

    def __iter__(self):
        return iter((self.mean, self.std))


def _label_key(spec):
    return zlib.crc32(spec.label.encode()) if spec is not None else 0


def evaluate(bundle, env, attack=None, episodes=10, seed=0, first_steps=None, stats=None):
    """Mean and std (over episodes) of the discounted return.

    Goals and start states come from a stream fixed by ``seed`` alone; the
    attack, if any, perturbs the scaled observation at every step (or the
    first ``first_steps``) while the dynamics use the true state.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    check_bundle(env, bundle)
    starts, goals = env.sample_start(np.random.default_rng([int(seed), 7]), episodes)
    noise = np.random.default_rng([int(seed), 8, _label_key(attack)])
    adv = attacks.make_adversary(bundle, attack, noise, stats, first_steps)
    ep = gcenv.rollout(env, attacks.make_observed_policy(bundle), goals, starts,
                       gamma=bundle.gamma, adversary=adv)
    r = ep.returns
    return Evaluation(float(np.mean(r)), float(np.std(r)), r)


# --- reports -----------------------------------------------------------------

ROW_FIELDS = ("env", "pipeline", "attack", "kind", "negative_mode", "target", "layer", "eps_state",
              "eps_goal", "seed", "mean", "std", "nature", "degradation", "best", "returns")
CURVE_FIELDS = ("env", "pipeline", "attack", "seed", "epoch", "mean", "std", "nature")
NUMERIC = {"layer": int, "seed": int, "epoch": int, "eps_state": float, "eps_goal": float,
           "mean": float, "std": float, "nature": float}


def degradation(nature, attacked):
    """Percent drop from ``nature``; ``None`` when ``nature <= 0``."""
    if nature is None or not nature > 0:
        return None
    return 100.0 * (nature - attacked) / nature


def _row(env_id, pipeline, spec, seed, ev, nature):
    return {
        "env": env_id, "pipeline": pipeline, "attack": spec.label, "kind": spec.kind,
        "negative_mode": spec.negative_mode if spec.kind.startswith("scr") else "",
        "target": spec.target, "layer": spec.layer, "eps_state": spec.eps_state,
        "eps_goal": spec.eps_goal, "seed": int(seed), "mean": ev.mean, "std": ev.std,
        "nature": nature, "degradation": degradation(nature, ev.mean), "best": False,
        "returns": [float(x) for x in ev.returns],
    }


@dataclass
class EvalReport:
    """Per-seed cells plus epoch curves; summaries are derived on demand."""
    rows: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def sort(self):
        self.rows.sort(key=lambda r: (r["env"], r["pipeline"], r["attack"], r["seed"]))
        self.curves.sort(key=lambda r: (r["env"], r["pipeline"], r["attack"], r["seed"], r["epoch"]))
        _flag_best(self.rows, ("env", "pipeline", "seed"))
        return self

    def merge(self, other):
        """Union of two reports; a cell present in both is taken from ``other``."""
        def union(a, b, keys):
            out = {tuple(r[k] for k in keys): r for r in a}
            out.update({tuple(r[k] for k in keys): r for r in b})
            return list(out.values())
        rows = union(self.rows, other.rows, ("env", "pipeline", "attack", "seed"))
        curves = union(self.curves, other.curves, ("env", "pipeline", "attack", "seed", "epoch"))
        return EvalReport(rows, curves, {**self.meta, **other.meta}).sort()

    def summary(self):
        """Mean and std across seeds for each (env, pipeline, attack)."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r["env"], r["pipeline"], r["attack"]), []).append(r)
        out = []
        for (env_id, pipe, label), rows in sorted(groups.items()):
            means = np.array([r["mean"] for r in rows])
            natures = [r["nature"] for r in rows if r["nature"] is not None]
            nature = float(np.mean(natures)) if natures else None
            m = float(np.mean(means))
            out.append({"env": env_id, "pipeline": pipe, "attack": label, "kind": rows[0]["kind"],
                        "negative_mode": rows[0]["negative_mode"], "target": rows[0]["target"],
                        "layer": rows[0]["layer"], "seeds": len(rows), "mean": m,
                        "std": float(np.std(means)), "nature": nature,
                        "degradation": degradation(nature, m), "best": False})
        _flag_best(out, ("env", "pipeline"))
        return out

    def best(self, env_id=None, pipeline=None):
        """Summary entry of the most damaging attack."""
        for s in self.summary():
            if s["best"] and env_id in (None, s["env"]) and pipeline in (None, s["pipeline"]):
                return s
        return None

    # serialisation

    def to_json(self):
        return json.dumps({"meta": self.meta, "rows": self.rows, "curves": self.curves}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d.get("rows", []), d.get("curves", []), d.get("meta", {}))

    def to_csv(self):
        return _write_csv(self.rows, ROW_FIELDS)

    def curves_to_csv(self):
        return _write_csv(self.curves, CURVE_FIELDS)

    @classmethod
    def from_csv(cls, text, curves_text=None, meta=None):
        rows = _read_csv(text)
        curves = _read_csv(curves_text) if curves_text else []
        return cls(rows, curves, meta or {})


def _flag_best(rows, keys):
    """Mark the lowest-mean entry of each group (ties go to the smallest label)."""
    groups = {}
    for r in rows:
        r["best"] = False
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    for g in groups.values():
        min(g, key=lambda r: (r["mean"], r["attack"]))["best"] = True


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def _write_csv(rows, fields):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(f)) for f in fields])
    return buf.getvalue()


def _parse(name, text):
    if name == "returns":
        return [float(x) for x in text.split()]
    if name == "best":
        return text == "true"
    if name == "degradation":
        return float(text) if text else None
    if name == "nature" and text == "":
        return None
    if name in NUMERIC:
        return NUMERIC[name](text)
    return text


def _read_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    return [{k: _parse(k, v) for k, v in row.items()} for row in reader]


def attack_grid(bundle, env, grid, seeds, episodes=10, first_steps=None, pipeline=None, stats=None):
    """Evaluate every attack of ``grid`` on one bundle for each seed.

    ``bundle`` may be a single bundle or a list with one bundle per seed.
    Nature (unattacked) returns are evaluated with the same streams.
    """
    bundles = bundle if isinstance(bundle, (list, tuple)) else [bundle] * len(seeds)
    if len(bundles) != len(seeds):
        raise ValueError("need one bundle per seed")
    stats = Counter() if stats is None else stats
    rows = []
    for b, seed in zip(bundles, seeds):
        name = pipeline or _pipeline_name(b)
        nature = evaluate(b, env, None, episodes, seed).mean
        for spec in grid:
            ev = evaluate(b, env, spec, episodes, seed, first_steps, stats)
            rows.append(_row(env.name, name, spec, seed, ev, nature))
    meta = {"goal_protocol": GOAL_PROTOCOL, "episodes": episodes, "first_steps": first_steps,
            "attack_fallbacks": int(stats["nonfinite_gradient"])}
    return EvalReport(rows, [], meta).sort()


def _pipeline_name(bundle):
    p = bundle.manifest.get("pipeline")
    if p:
        return f"{p['base']}/{p['defense']['pipeline']}"
    return f"{bundle.algo}/vanilla"


def layer_sweep(bundle, env, spec, layers=(1, 2, 3), seeds=(0,), episodes=10, pipeline=None):
    """The same attack with the representation layer varied."""
    grid = [spec.replace(layer=int(l)) for l in layers]
    report = attack_grid(bundle, env, grid, list(seeds), episodes, pipeline=pipeline)
    out = {}
    for l in layers:
        means = [r["mean"] for r in report.rows if r["layer"] == int(l)]
        out[int(l)] = (float(np.mean(means)), float(np.std(means)))
    return out, report


def robustness_curve(checkpoints, env, spec, episodes=10, seed=0, pipeline=None):
    """Attacked and nature returns of a frozen attack against per-epoch checkpoints.

    ``checkpoints`` lists bundles or checkpoint paths in epoch order.
    """
    rows = []
    for epoch, ck in enumerate(checkpoints):
        b = ck if isinstance(ck, agents.AgentBundle) else agents.AgentBundle.load(ck)
        nature = evaluate(b, env, None, episodes, seed).mean
        ev = evaluate(b, env, spec, episodes, seed)
        rows.append({"env": env.name, "pipeline": pipeline or _pipeline_name(b), "attack": spec.label,
                     "seed": int(seed), "epoch": epoch, "mean": ev.mean, "std": ev.std, "nature": nature})
    return rows


def train_seeds(cfg, dataset, env=None, checkpoint_root=None):
    """Train the configured pipeline once per seed slot; returns the bundles."""
    env = env or cfg.make_env()
    check_dataset(env, dataset)
    pipe = cfg.pipeline()
    out = []
    for k, seed in enumerate(cfg.seeds()):
        b = agents.AgentBundle.build(env, cfg.agent_config(), seed=seed)
        ck = None if checkpoint_root is None else Path(checkpoint_root) / f"seed_{k}"
        b, _ = pipe.train(b, dataset, cfg.schedule(seed), checkpoint_dir=ck, env=env)
        out.append(b)
    return out


# --- emission ----------------------------------------------------------------


def text_table(report):
    """Plain-text table per (env, pipeline, target): attack kinds by negative mode."""
    summ = report.summary()
    lines = []
    modes = list(attacks.NEGATIVE_MODES)
    keyed = {}
    for s in summ:
        keyed.setdefault((s["env"], s["pipeline"], s["target"], s["layer"]), {})[(s["kind"], s["negative_mode"])] = s
    for (env_id, pipe, target, layer), cells in sorted(keyed.items()):
        nature = next(iter(cells.values()))["nature"]
        head = f"{env_id} | {pipe} | target={target} | layer={layer}"
        if nature is not None:
            head += f" | nature={nature:.2f}"
        lines.append(head)
        lines.append(f"{'attack':<10}" + "".join(f"{m:>22}" for m in modes))
        for kind in attacks.KINDS:
            row = [f"{kind:<10}"]
            present = False
            for m in modes:
                s = cells.get((kind, m)) or (cells.get((kind, "")) if m == modes[-1] else None)
                if s is None:
                    row.append(f"{'-':>22}")
                    continue
                present = True
                mark = "*" if s["best"] else " "
                row.append(f"{s['mean']:>12.2f} +- {s['std']:<5.2f}{mark}")
            if present:
                lines.append("".join(row))
        lines.append("")
    return "\n".join(lines)


def _plot(curves, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    groups = {}
    for r in curves:
        groups.setdefault((r["pipeline"], r["attack"]), []).append(r)
    for (pipe, label), rows in sorted(groups.items()):
        epochs = sorted({r["epoch"] for r in rows})
        mean = [np.mean([r["mean"] for r in rows if r["epoch"] == e]) for e in epochs]
        nat = [np.mean([r["nature"] for r in rows if r["epoch"] == e]) for e in epochs]
        ax.plot(epochs, mean, label=f"{pipe} {label}")
        ax.plot(epochs, nat, linestyle="--", label=f"{pipe} nature")
    ax.set_xlabel("epoch")
    ax.set_ylabel("discounted return")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit_report(report, out_dir, formats=("csv", "json", "txt", "png")):
    """Write the report files and a ``manifest.json`` listing them with hashes.

    Returns the list of written paths (manifest last).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.sort()
    files = {}
    if "csv" in formats:
        files["cells.csv"] = report.to_csv()
        files["summary.csv"] = _write_csv(report.summary(), ("env", "pipeline", "attack", "kind", "negative_mode",
                                                             "target", "layer", "seeds", "mean", "std",
                                                             "nature", "degradation", "best"))
        if report.curves:
            files["curves.csv"] = report.curves_to_csv()
    if "json" in formats:
        files["report.json"] = report.to_json()
    if "txt" in formats:
        files["table.txt"] = text_table(report)
    written = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        written.append(p)
    if "png" in formats and report.curves:
        p = out / "curves.png"
        _plot(report.curves, p)
        written.append(p)
    manifest = {"files": [{"name": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()}
                          for p in written], "meta": report.meta}
    mp = out / "manifest.json"
    mp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    written.append(mp)
    return written
