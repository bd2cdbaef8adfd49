"""Membership inference against models trained on synthetic (or real) tables.

The attacker only sees the target model's outputs on a record: the
probability it assigns to the record's true label, the logistic loss, and the
maximum class confidence. Members are the real rows the generator was fitted
or prompted on; non-members are real rows it never saw.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .gbm import GbmConfig, GbmModel, predict_proba, train
from .generators import fit_logistic
from .schema import DataTable, format_value, label_vector
from .utility import auroc

P_CLAMP = 1e-7
MIN_SET = 30
MISMATCH_SMD = 0.25
ATTACKS = ("threshold", "logistic")


@dataclass(frozen=True, eq=False)
class AttackFeatures:
    p_true: np.ndarray
    loss: np.ndarray
    confidence: np.ndarray

    def __len__(self):
        return len(self.loss)

    def matrix(self) -> np.ndarray:
        return np.column_stack([self.p_true, self.loss, self.confidence])


def attack_features_from_proba(p, y) -> AttackFeatures:
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    return AttackFeatures(np.where(y == 1, p, 1 - p), loss, np.maximum(p, 1 - p))


def derive_attack_features(model: GbmModel, rows: DataTable) -> AttackFeatures:
    """Per-record p(true label), clamped logistic loss and max(p, 1-p)."""
    if model.label not in rows.schema:
        raise KeyError(f"rows lack the label column {model.label!r}")
    y = label_vector(rows)
    if np.isnan(y).any():
        raise ValueError("attack rows must all carry a label")
    return attack_features_from_proba(predict_proba(model, rows), y)


def membership_advantage(member_scores, nonmember_scores) -> float:
    """max over thresholds t of |TPR(t) - FPR(t)|, predicting member when score >= t.

    Only thresholds at observed scores (plus +inf, where both rates are 0)
    can change the rates, so those are the ones enumerated.
    """
    m = np.sort(np.asarray(member_scores, dtype=float))
    n = np.sort(np.asarray(nonmember_scores, dtype=float))
    nm, nn = len(m), len(n)
    if nm == 0 or nn == 0:
        raise ValueError("both score sets must be non-empty")
    t = np.unique(np.concatenate([m, n]))
    cm = nm - np.searchsorted(m, t, side="left")
    cn = nn - np.searchsorted(n, t, side="left")
    return float(max(0.0, np.max(np.abs(cm / nm - cn / nn))))


@dataclass(frozen=True, eq=False)
class MiaSetup:
    target_model: GbmModel
    member_rows: DataTable
    nonmember_rows: DataTable
    attack: str = "threshold"
    member_ids: np.ndarray | None = None
    nonmember_ids: np.ndarray | None = None

    def __post_init__(self):
        """Disjointness is checked on record ids when given, else on row contents.

        Distinct records can coincide once projected onto a few columns, so
        callers carving both sets from one table should pass its row indices.
        """
        if self.attack not in ATTACKS:
            raise ValueError(f"attack must be one of {ATTACKS}")
        if (self.member_ids is None) != (self.nonmember_ids is None):
            raise ValueError("pass record ids for both sets or for neither")
        if self.member_ids is not None:
            for ids, rows in ((self.member_ids, self.member_rows), (self.nonmember_ids, self.nonmember_rows)):
                if len(ids) != rows.n_rows:
                    raise ValueError("one record id per row is required")
            shared = set(np.asarray(self.member_ids).tolist()) & set(np.asarray(self.nonmember_ids).tolist())
        else:
            shared = _row_keys(self.member_rows) & _row_keys(self.nonmember_rows)
        if shared:
            raise ValueError(f"member and non-member sets share {len(shared)} row(s)")

    @property
    def member_features(self) -> AttackFeatures:
        return derive_attack_features(self.target_model, self.member_rows)

    @property
    def nonmember_features(self) -> AttackFeatures:
        return derive_attack_features(self.target_model, self.nonmember_rows)


def _row_keys(table: DataTable) -> set:
    names = table.schema.names
    cols = [table.columns[n] for n in names]
    return {tuple(format_value(c[i]) for c in cols) for i in range(table.n_rows)}


@dataclass
class MiaReport:
    attack_auroc: float
    membership_advantage: float
    empirical_risk_member: float
    empirical_risk_nonmember: float
    n_member: int
    n_nonmember: int
    attack: str = "threshold"
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.membership_advantage <= 1:
            raise ValueError("membership advantage must lie in [0, 1]")

    @property
    def risk_gap(self) -> float:
        return self.empirical_risk_member - self.empirical_risk_nonmember

    @property
    def valid(self) -> bool:
        return not any(f.startswith("distribution mismatch") for f in self.flags)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["risk_gap"] = self.risk_gap
        d["valid"] = self.valid
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MiaReport":
        keys = ("attack_auroc", "membership_advantage", "empirical_risk_member", "empirical_risk_nonmember",
                "n_member", "n_nonmember", "attack", "flags")
        return cls(**{k: d[k] for k in keys})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _mismatch(setup: MiaSetup) -> list[str]:
    flags = []
    for name in setup.target_model.feature_names:
        spec = setup.member_rows.schema[name]
        if not spec.is_continuous or name not in setup.nonmember_rows.schema:
            continue
        a = setup.member_rows.columns[name]
        b = setup.nonmember_rows.columns[name]
        a, b = a[~np.isnan(a)], b[~np.isnan(b)]
        if len(a) < 2 or len(b) < 2:
            continue
        sd = np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2)
        if sd > 0 and abs(a.mean() - b.mean()) / sd > MISMATCH_SMD:
            flags.append(f"distribution mismatch: {name} standardized mean difference "
                         f"{abs(a.mean() - b.mean()) / sd:.2f} > {MISMATCH_SMD}")
    return flags


def _logistic_scores(X: np.ndarray, member: np.ndarray, rng_seed: int) -> np.ndarray:
    # two-fold cross-fitting so no record is scored by a model that saw its own label
    mu, sd = X.mean(axis=0), X.std(axis=0)
    Z = (X - mu) / np.where(sd > 0, sd, 1.0)
    fold = np.random.default_rng(rng_seed).permutation(len(member)) % 2
    out = np.empty(len(member))
    for k in (0, 1):
        tr, te = fold != k, fold == k
        b0, w = fit_logistic(Z[tr], member[tr].astype(float))
        out[te] = expit(b0 + Z[te] @ w)
    return out


def attack_scores(setup: MiaSetup, rng_seed: int = 0) -> tuple[np.ndarray, np.ndarray, AttackFeatures,
                                                              AttackFeatures]:
    """(scores, membership 0/1) over members then non-members; higher score = more member-like."""
    fm, fn = setup.member_features, setup.nonmember_features
    member = np.r_[np.ones(len(fm)), np.zeros(len(fn))]
    if setup.attack == "threshold":
        scores = -np.r_[fm.loss, fn.loss]
    else:
        scores = _logistic_scores(np.vstack([fm.matrix(), fn.matrix()]), member, rng_seed)
    return scores, member, fm, fn


def run_attack(setup: MiaSetup, rng_seed: int = 0) -> MiaReport:
    nm, nn = setup.member_rows.n_rows, setup.nonmember_rows.n_rows
    if nm < MIN_SET or nn < MIN_SET:
        raise ValueError(f"need at least {MIN_SET} members and {MIN_SET} non-members, got {nm}/{nn}")
    scores, member, fm, fn = attack_scores(setup, rng_seed)
    flags = _mismatch(setup)
    if np.all(scores == scores[0]):
        flags.append("degenerate: all attack scores identical")
        auc, adv = 0.5, 0.0
    else:
        auc = auroc(scores, member)
        adv = membership_advantage(scores[member == 1], scores[member == 0])
    return MiaReport(auc, adv, float(fm.loss.mean()), float(fn.loss.mean()), nm, nn, setup.attack, flags)


def attack_feature_csv(setup: MiaSetup) -> str:
    """Per-record dump: membership, p_true, loss, confidence."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["membership", "p_true", "loss", "confidence"])
    for label, f in (("1", setup.member_features), ("0", setup.nonmember_features)):
        for i in range(len(f)):
            w.writerow([label, repr(float(f.p_true[i])), repr(float(f.loss[i])), repr(float(f.confidence[i]))])
    return buf.getvalue()


def mia_experiment(real: DataTable, synthetic: DataTable, config: GbmConfig, rng_seed: int,
                   member_index: Sequence[int], attack: str = "threshold",
                   target: GbmModel | None = None) -> tuple[MiaReport, MiaSetup]:
    """Train a target on ``synthetic`` and attack it with real rows.

    ``member_index`` picks the real rows the generator saw. Every other real
    row is a non-member candidate; a random subset as large as the member set
    is used so the attack is balanced. Pass ``target`` to reuse a model
    already trained on ``synthetic``.
    """
    if real.n_rows < 2 * MIN_SET:
        raise ValueError(f"real table needs at least {2 * MIN_SET} rows, got {real.n_rows}")
    member_index = np.unique(np.asarray(member_index, dtype=int))
    rest = np.setdiff1d(np.arange(real.n_rows), member_index)
    if len(member_index) < MIN_SET or len(rest) < MIN_SET:
        raise ValueError("insufficient rows to carve member and non-member sets")
    rng = np.random.default_rng(rng_seed)
    nonmember_index = np.sort(rng.choice(rest, size=min(len(rest), len(member_index)), replace=False))
    model = target if target is not None else train(synthetic, config)
    setup = MiaSetup(model, real.take(member_index), real.take(nonmember_index), attack,
                     member_index, nonmember_index)
    return run_attack(setup, rng_seed), setup
