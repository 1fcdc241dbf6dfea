"""Synthetic longitudinal corpus with known ground truth.

Four findings occupy the four quadrants of a 16x16 image; each finding
carries a severity in 0..3 that evolves between visits under a Markov
rule whose worsening probability grows with the day gap. The image shows
only the *current* severities, while the report's comparative words
(improved / unchanged / worsened) depend on the previous visit too — so
comparatives are provably unlearnable from a single image, which is the
property the temporal model is supposed to exploit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import SeededRng
from .encoders import ImageGrid, Vocabulary
from .errors import ConfigError, ContractViolation

FINDINGS = ("effusion", "edema", "consolidation", "pneumothorax")
MAX_SEVERITY = 3

# Quadrant corners (row, col) in finding order: TL, TR, BL, BR.
_QUADRANTS = ((0, 0), (0, 8), (8, 0), (8, 8))
IMAGE_SIDE = 16
_HALF = IMAGE_SIDE // 2

COMPARATIVES = ("improved", "unchanged", "worsened")
PROGRESSIONS = ("improving", "stable", "worsening")
FIRST_VISIT_LABEL = "none"

TEMPLATE_WORDS = tuple(
    list(FINDINGS)
    + ["severity", "0", "1", "2", "3"]
    + list(COMPARATIVES)
    + ["no", "acute", "findings", "."]
)


@dataclass(frozen=True)
class FindingState:
    """Severity per finding, aligned with FINDINGS order."""

    severities: tuple

    def __post_init__(self):
        sev = tuple(int(s) for s in self.severities)
        object.__setattr__(self, "severities", sev)
        if len(sev) != len(FINDINGS):
            raise ContractViolation(f"need {len(FINDINGS)} severities, got {len(sev)}")
        if any(s < 0 or s > MAX_SEVERITY for s in sev):
            raise ContractViolation(f"severities must lie in 0..{MAX_SEVERITY}, got {sev}")

    def severity(self, finding):
        return self.severities[FINDINGS.index(finding)]


@dataclass
class SimParams:
    """Knobs of the trajectory simulator and image renderer."""

    visits_min: int = 3
    visits_max: int = 5
    gap_min: int = 10
    gap_max: int = 400
    base_worsen: float = 0.15
    worsen_cap: float = 0.6
    gap_coeff: float = 0.001
    improve: float = 0.15
    noise_scale: float = 1.0

    def __post_init__(self):
        if not (1 <= self.visits_min <= self.visits_max <= 6):
            raise ConfigError(f"visit range must satisfy 1 <= min <= max <= 6, got "
                              f"{self.visits_min}..{self.visits_max}")
        if not (1 <= self.gap_min <= self.gap_max):
            raise ConfigError("gap range must satisfy 1 <= min <= max")
        probs = (self.base_worsen, self.worsen_cap, self.improve)
        if any(p < 0 or p > 1 for p in probs):
            raise ConfigError(f"probabilities must lie in [0,1], got {probs}")
        if self.worsen_cap + self.improve > 1:
            raise ConfigError("worsen_cap + improve must not exceed 1")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")

    def p_worsen(self, gap_days):
        return min(self.worsen_cap, self.base_worsen + self.gap_coeff * gap_days)


@dataclass
class DiseaseTrajectory:
    patient_id: str
    dates: list
    states: list  # FindingState per visit

    def __post_init__(self):
        if not (1 <= len(self.dates) <= 6) or len(self.dates) != len(self.states):
            raise ContractViolation("trajectory needs 1..6 aligned (date, state) visits")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ContractViolation("trajectory dates must be strictly increasing")


# Arbitrary absolute origin for study dates; only day differences matter.
_BASE_DATE = 700000


def simulate_trajectory(rng, patient_id, params):
    """Markov walk over severities; draw order is fixed for determinism.

    Draws: visit count, start date, initial severities (finding order),
    then per visit a gap followed by one transition draw per finding.
    """
    n_visits = rng.integers(params.visits_min, params.visits_max)
    date = _BASE_DATE + rng.integers(0, 99)
    sev = [rng.integers(0, MAX_SEVERITY) for _ in FINDINGS]
    dates = [date]
    states = [FindingState(tuple(sev))]
    for _ in range(n_visits - 1):
        gap = rng.integers(params.gap_min, params.gap_max)
        date += gap
        p_w = params.p_worsen(gap)
        for i in range(len(FINDINGS)):
            u = rng.random()
            if u < p_w:
                sev[i] = min(MAX_SEVERITY, sev[i] + 1)
            elif u < p_w + params.improve:
                sev[i] = max(0, sev[i] - 1)
        dates.append(date)
        states.append(FindingState(tuple(sev)))
    return DiseaseTrajectory(patient_id, dates, states)


def render_image(state, rng, noise_scale=1.0):
    """Quadrant brightness encodes current severity; additive uniform noise.

    pixel = severity/3 * 0.8 + U[0, 0.2*noise_scale]. Depends only on the
    current state, never on history.
    """
    px = np.zeros((IMAGE_SIDE, IMAGE_SIDE))
    for sev, (r, c) in zip(state.severities, _QUADRANTS):
        base = sev / MAX_SEVERITY * 0.8
        noise = rng.uniform(0.0, 0.2 * noise_scale, (_HALF, _HALF)) if noise_scale > 0 else 0.0
        px[r : r + _HALF, c : c + _HALF] = base + noise
    return ImageGrid(px)


def comparative_word(prev_sev, cur_sev):
    if cur_sev > prev_sev:
        return "worsened"
    if cur_sev < prev_sev:
        return "improved"
    return "unchanged"


def progression_label(prev_sev, cur_sev):
    if cur_sev > prev_sev:
        return "worsening"
    if cur_sev < prev_sev:
        return "improving"
    return "stable"


def render_report(state, prev=None):
    """Template report: per mentioned finding "<name> severity <k> [comparative]".

    A finding is mentioned when its severity is nonzero now or was nonzero
    at the previous visit; with a previous visit the comparative word is
    appended. No mentions at all -> "no acute findings .".
    """
    parts = []
    for i, name in enumerate(FINDINGS):
        cur = state.severities[i]
        prev_sev = prev.severities[i] if prev is not None else 0
        if cur == 0 and prev_sev == 0:
            continue
        parts += [name, "severity", str(cur)]
        if prev is not None:
            parts.append(comparative_word(prev_sev, cur))
    if not parts:
        parts = ["no", "acute", "findings"]
    return " ".join(parts) + " ."


@dataclass
class CorpusRecord:
    patient_id: str
    study_id: str
    study_date: int
    image: ImageGrid
    report: str
    state: FindingState
    progression: tuple  # per finding: "none" on first visit, else a PROGRESSIONS value


def template_vocabulary():
    return Vocabulary.from_words(TEMPLATE_WORDS)


def generate_corpus(seed, n_patients, params=None):
    """Simulate, render, and serialize n_patients trajectories.

    Each patient uses a child RNG derived from (seed, patient index), so
    output is independent of generation order. Records come out sorted by
    (patient_id, study_date).
    """
    if n_patients < 1:
        raise ContractViolation(f"n_patients must be >= 1, got {n_patients}")
    params = params or SimParams()
    records = []
    root = SeededRng(seed)
    for i in range(n_patients):
        rng = root.spawn(i)
        pid = f"p{i:04d}"
        traj = simulate_trajectory(rng, pid, params)
        prev = None
        for j, (date, state) in enumerate(zip(traj.dates, traj.states)):
            if prev is None:
                prog = tuple(FIRST_VISIT_LABEL for _ in FINDINGS)
            else:
                prog = tuple(
                    progression_label(p, c)
                    for p, c in zip(prev.severities, state.severities)
                )
            records.append(
                CorpusRecord(
                    patient_id=pid,
                    study_id=f"{pid}s{j}",
                    study_date=date,
                    image=render_image(state, rng, params.noise_scale),
                    report=render_report(state, prev),
                    state=state,
                    progression=prog,
                )
            )
            prev = state
    records.sort(key=lambda r: (r.patient_id, r.study_date))
    return records, template_vocabulary()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _labels_field(rec):
    cells = []
    for name, sev, prog in zip(FINDINGS, rec.state.severities, rec.progression):
        cells.append(f"{name}:{sev}:{prog}")
    return ",".join(cells)


def write_corpus(records, path):
    """One record per line: pid, study id, date, report, labels, 256 pixels."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            pixels = ",".join(f"{v:.6f}" for v in r.image.pixels.reshape(-1))
            fh.write(
                f"{r.patient_id}\t{r.study_id}\t{r.study_date}\t{r.report}\t"
                f"{_labels_field(r)}\t{pixels}\n"
            )


def read_corpus(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise ContractViolation(f"{path}:{line_no}: expected 6 fields, got {len(fields)}")
            pid, sid, date, report, labels, pixels = fields
            sev, prog = [], []
            for cell in labels.split(","):
                name, s, p = cell.split(":")
                sev.append(int(s))
                prog.append(p)
            px = np.array([float(v) for v in pixels.split(",")]).reshape(IMAGE_SIDE, IMAGE_SIDE)
            records.append(
                CorpusRecord(
                    patient_id=pid,
                    study_id=sid,
                    study_date=int(date),
                    image=ImageGrid(px),
                    report=report,
                    state=FindingState(tuple(sev)),
                    progression=tuple(prog),
                )
            )
    return records


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def __post_init__(self):
        fracs = (self.train, self.val, self.test)
        if any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fracs}")


def split_by_patient(records, spec, seed):
    """Shuffle patients with the seed, then cut by fraction; no patient straddles."""
    patients = sorted({r.patient_id for r in records})
    n = len(patients)
    rng = SeededRng(seed)
    rng.shuffle(patients)
    n_train = int(n * spec.train)
    n_val = int(n * spec.val)
    groups = {
        "train": set(patients[:n_train]),
        "val": set(patients[n_train : n_train + n_val]),
        "test": set(patients[n_train + n_val :]),
    }
    for name, frac in (("train", spec.train), ("val", spec.val), ("test", spec.test)):
        if frac > 0 and not groups[name]:
            raise ConfigError(f"too few patients ({n}) to populate the {name} split")
    out = []
    for name in ("train", "val", "test"):
        out.append([r for r in records if r.patient_id in groups[name]])
    return tuple(out)


def patient_histories(records):
    """Group records by patient, each list already date-ordered."""
    by_pid = {}
    for r in records:
        by_pid.setdefault(r.patient_id, []).append(r)
    for pid, recs in by_pid.items():
        recs.sort(key=lambda r: r.study_date)
    return by_pid
