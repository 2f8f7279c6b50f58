"""Attack success rates, surrogate x victim transfer matrices, FPS timing and report files."""

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackBudget, iterative_attack
from .errors import ContractError, ParseError
from .gan import generate_adversarial
from .oracles import OracleConfig, make_oracle
from .zoo import accuracy, predict

CSV_COLUMNS = ("method", "surrogate", "victim", "asr", "fps", "epsilon", "seed")
SELF = "self"


def asr(model, x_clean, x_adv, batch_size=256):
    """Fraction of samples whose predicted class changes between ``x_clean`` and ``x_adv``.

    Argmax ties resolve to the lowest class index on both sides.
    """
    if x_clean.shape != x_adv.shape:
        raise ContractError(f"clean {tuple(x_clean.shape)} and adversarial {tuple(x_adv.shape)} shapes differ")
    if len(x_clean) == 0:
        raise ContractError("ASR of an empty batch is undefined")
    altered = predict(model, x_clean, batch_size) != predict(model, x_adv, batch_size)
    return altered.sum().item() / len(x_clean)


@dataclass
class TransferReport:
    """ASR cube indexed ``asr[method][surrogate][victim]``; ``None`` marks a self cell."""

    methods: list
    surrogates: list
    victims: list
    asr: list
    fps: dict = field(default_factory=dict)
    epsilon: float = 16 / 255
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)  # wall-clock data; excluded from reproducibility checks

    def __post_init__(self):
        shape = (len(self.methods), len(self.surrogates), len(self.victims))
        if len(self.asr) != shape[0] or any(len(r) != shape[1] or any(len(c) != shape[2] for c in r) for r in self.asr):
            raise ContractError(f"asr matrix does not have shape {shape}")
        for value in self.values():
            if value is not None and not 0.0 <= value <= 1.0:
                raise ContractError(f"asr value {value} outside [0, 1]")

    def cell(self, method, surrogate, victim):
        return self.asr[self.methods.index(method)][self.surrogates.index(surrogate)][self.victims.index(victim)]

    def cells(self):
        for i, m in enumerate(self.methods):
            for j, s in enumerate(self.surrogates):
                for k, v in enumerate(self.victims):
                    yield m, s, v, self.asr[i][j][k]

    def values(self):
        return [value for *_, value in self.cells()]

    def to_dict(self, include_timing=True):
        out = {
            "methods": list(self.methods),
            "surrogates": list(self.surrogates),
            "victims": list(self.victims),
            "asr": self.asr,
            "fps": dict(self.fps),
            "epsilon": self.epsilon,
            "seed": self.seed,
            "metadata": self.metadata,
        }
        if include_timing:
            out["timing"] = self.timing
        return out


# ---------------------------------------------------------------------------
# Crafting
# ---------------------------------------------------------------------------


def iterative_crafter(oracle_cfg, budget):
    """Craft function running the sign-step driver with a fresh oracle per call."""

    def craft(surrogate, x, y):
        return iterative_attack(surrogate, x, y, make_oracle(oracle_cfg, surrogate), budget, record_trace=False).x_adv

    craft.epsilon = budget.epsilon
    return craft


def generator_crafter(G, epsilon=None):
    """Craft function applying a trained generator (the surrogate only shaped its training)."""

    def craft(surrogate, x, y):
        return generate_adversarial(G, x, epsilon).x_adv

    craft.epsilon = G.epsilon if epsilon is None else epsilon
    return craft


def _as_crafter(method, budget):
    if callable(method):
        return method
    return iterative_crafter(OracleConfig(method=method, epsilon=budget.epsilon, seed=budget.seed), budget)


def transfer_matrix(methods, surrogates, victims, dataset, budgets=None, metadata=None):
    """Craft once per (method, surrogate) and score every victim on the same tensors.

    ``methods`` maps a name to either an oracle method string or a craft function
    ``(surrogate, x, y) -> x_adv``; a plain sequence of oracle names also works.
    ``surrogates``/``victims`` map identifiers to classifiers.  A victim whose
    identifier equals the surrogate's becomes a self cell.  ``budgets`` is one
    AttackBudget or a per-method mapping (used for string methods).
    """
    if not isinstance(methods, dict):
        methods = {m: m for m in methods}
    budgets = budgets if budgets is not None else AttackBudget()
    x, y = dataset.data, dataset.labels
    cube, crafted = [], {}
    eps = None
    for name, method in methods.items():
        budget = budgets[name] if isinstance(budgets, dict) else budgets
        craft = _as_crafter(method, budget)
        eps = getattr(craft, "epsilon", budget.epsilon) if eps is None else eps
        rows = []
        for s_name, surrogate in surrogates.items():
            x_adv = craft(surrogate, x, y)
            crafted[(name, s_name)] = x_adv
            rows.append([None if v_name == s_name else asr(victim, x, x_adv) for v_name, victim in victims.items()])
        cube.append(rows)
    seed = budgets.seed if isinstance(budgets, AttackBudget) else 0
    report = TransferReport(list(methods), list(surrogates), list(victims), cube,
                            epsilon=eps if eps is not None else AttackBudget().epsilon, seed=seed,
                            metadata=dict(metadata or {}))
    report.metadata.setdefault("asr_convention", "prediction altered relative to the model's clean prediction")
    report.crafted = crafted
    return report


# ---------------------------------------------------------------------------
# FPS
# ---------------------------------------------------------------------------


def fps_benchmark(attack_fn, dataset, warmup_batches=1, timed_batches=3, batch_size=None, clock=time.perf_counter):
    """Images crafted per wall-clock second over ``timed_batches`` after ``warmup_batches``.

    ``attack_fn(x, y)`` crafts one batch.  Batches cycle through ``dataset`` in
    order; ``batch_size`` defaults to the whole dataset.
    """
    if timed_batches < 1 or warmup_batches < 0:
        raise ContractError("need timed_batches >= 1 and warmup_batches >= 0")
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot benchmark on an empty dataset")
    bs = n if batch_size is None else min(batch_size, n)
    starts = list(range(0, n - bs + 1, bs))

    def batch(i):
        s = starts[i % len(starts)]
        return dataset.data[s:s + bs], dataset.labels[s:s + bs]

    for i in range(warmup_batches):
        attack_fn(*batch(i))
    images, elapsed = 0, 0.0
    for i in range(warmup_batches, warmup_batches + timed_batches):
        x, y = batch(i)
        t0 = clock()
        attack_fn(x, y)
        elapsed += clock() - t0
        images += len(x)
    return images / elapsed if elapsed > 0 else math.inf


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def _fmt(value):
    return "" if value is None else repr(float(value))


def report_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for m, s, v, value in report.cells():
        writer.writerow([m, s, v, SELF if value is None else _fmt(value), _fmt(report.fps.get(m)),
                         _fmt(report.epsilon), report.seed])
    if not report.victims:
        for m in report.methods:
            for s in report.surrogates or [""]:
                writer.writerow([m, s, "", "", _fmt(report.fps.get(m)), _fmt(report.epsilon), report.seed])
    return buf.getvalue()


def write_report(report, path, fmt=None):
    """Write ``report`` as CSV or JSON (``fmt`` defaults to the file suffix)."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path.write_text(report_csv(report))
    elif fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    else:
        raise ContractError(f"unknown report format {fmt!r}; expected csv or json")
    return path


def read_report(path):
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"corrupt report {path}: {exc}") from exc
        return TransferReport(**doc)
    if path.suffix.lower() == ".csv":
        return _read_csv(path)
    raise ParseError(f"cannot infer report format from {path.name}")


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ParseError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        rows = list(reader)
    methods, surrogates, victims, fps = [], [], [], {}
    epsilon, seed = AttackBudget().epsilon, 0
    for row in rows:
        for key, seen in (("method", methods), ("surrogate", surrogates), ("victim", victims)):
            if row[key] and row[key] not in seen:
                seen.append(row[key])
        if row["fps"]:
            fps[row["method"]] = float(row["fps"])
        epsilon, seed = float(row["epsilon"]), int(row["seed"])
    cube = [[[None] * len(victims) for _ in surrogates] for _ in methods]
    for row in rows:
        if row["victim"]:
            value = None if row["asr"] == SELF else float(row["asr"])
            cube[methods.index(row["method"])][surrogates.index(row["surrogate"])][victims.index(row["victim"])] = value
    return TransferReport(methods, surrogates, victims, cube, fps, epsilon, seed)


def plot_report(report, path):
    """PNG bar chart of ASR per victim, one group per (method, surrogate). Needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = [(m, s) for m in report.methods for s in report.surrogates]
    width = 0.8 / max(len(report.victims), 1)
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(groups)), 3))
    for k, victim in enumerate(report.victims):
        heights = [report.cell(m, s, victim) or 0.0 for m, s in groups]
        ax.bar([i + k * width for i in range(len(groups))], heights, width, label=victim)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(groups))])
    ax.set_xticklabels([f"{m}\n({s})" for m, s in groups], fontsize=7)
    ax.set_ylabel("ASR")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def clean_accuracies(models, dataset):
    return {name: accuracy(model, dataset) for name, model in models.items()}

