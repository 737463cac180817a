"""Network data: MATPOWER case parsing, per-unit conversion and admittances.

All quantities inside a :class:`NetworkCase` are per unit on ``base_mva``
and every bus reference is a dense internal index ``0..N-1``.  External bus
labels from the case file are kept on :class:`Bus` and in ``bus_index``.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class CaseError(ValueError):
    """Base class for problems with case data."""


class CaseParseError(CaseError):
    pass


class CaseValidationError(CaseError):
    pass


class BusKind(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    v_min: float
    v_max: float
    g_shunt: float
    b_shunt: float
    p_load: float
    q_load: float
    base_kv: float = 0.0
    v_init: float = 1.0
    a_init: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float
    s_rating: float
    ratio: float = 0.0
    status: bool = True

    @property
    def g(self) -> float:
        return self.r / (self.r**2 + self.x**2)

    @property
    def b(self) -> float:
        return -self.x / (self.r**2 + self.x**2)

    @property
    def limited(self) -> bool:
        return self.s_rating > 0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_linear: float
    cost_offset: float = 0.0
    v_set: float = 1.0
    p_init: float = 0.0
    q_init: float = 0.0


@dataclass(frozen=True)
class WindFarm:
    bus: int
    p_forecast: float
    sigma: float
    pf_min: float = 0.95

    @property
    def lambda_max(self) -> float:
        """Largest admissible |Q/P| ratio for the power-factor limit."""
        return math.sqrt(1.0 - self.pf_min**2) / self.pf_min


@dataclass(frozen=True)
class WindAddition:
    """A wind farm to attach at an external bus label, in MW."""

    bus_label: int
    p_mw: float
    sigma_mw: float
    pf_min: float = 0.95


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    wind_farms: tuple[WindFarm, ...] = ()
    base_mva: float = 100.0
    name: str = "case"
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_wind(self) -> int:
        return len(self.wind_farms)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == BusKind.SLACK)

    @cached_property
    def kinds(self) -> np.ndarray:
        return np.array([int(b.kind) for b in self.buses])

    @cached_property
    def f(self) -> np.ndarray:
        return np.array([br.from_bus for br in self.branches], dtype=int)

    @cached_property
    def t(self) -> np.ndarray:
        return np.array([br.to_bus for br in self.branches], dtype=int)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([g.bus for g in self.generators], dtype=int)

    @cached_property
    def wind_bus(self) -> np.ndarray:
        return np.array([w.bus for w in self.wind_farms], dtype=int)

    @cached_property
    def rating(self) -> np.ndarray:
        return np.array([br.s_rating for br in self.branches])

    @cached_property
    def p_load(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses])

    @cached_property
    def q_load(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses])

    @cached_property
    def v_min(self) -> np.ndarray:
        return np.array([b.v_min for b in self.buses])

    @cached_property
    def v_max(self) -> np.ndarray:
        return np.array([b.v_max for b in self.buses])

    @cached_property
    def p_forecast(self) -> np.ndarray:
        return np.array([w.p_forecast for w in self.wind_farms])

    @cached_property
    def gen_matrix(self) -> sp.csr_matrix:
        """Bus x generator incidence (1 where generator g sits on bus i)."""
        return sp.csr_matrix(
            (np.ones(self.n_gen), (self.gen_bus, np.arange(self.n_gen))),
            shape=(self.n_bus, self.n_gen),
        )

    @cached_property
    def wind_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (np.ones(self.n_wind), (self.wind_bus, np.arange(self.n_wind))),
            shape=(self.n_bus, self.n_wind),
        )

    @cached_property
    def _gens_by_bus(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for k, g in enumerate(self.generators):
            out.setdefault(g.bus, []).append(k)
        return out

    def gens_at(self, bus: int) -> list[int]:
        return list(self._gens_by_bus.get(int(bus), []))

    @cached_property
    def slack_gen(self) -> int:
        """First generator at the reference bus; it absorbs loss changes."""
        gens = self.gens_at(self.slack)
        if not gens:
            raise CaseValidationError("reference bus has no generator")
        return gens[0]

    def is_radial(self) -> bool:
        return self.n_branch == self.n_bus - 1 and _n_islands(self) == 1

    def dispatch_cost(self, p_gen) -> float:
        """Generation cost in currency/h for per-unit dispatch ``p_gen``."""
        p_gen = np.asarray(p_gen, dtype=float)
        lin = np.array([g.cost_linear for g in self.generators])
        off = sum(g.cost_offset for g in self.generators)
        return float(lin @ p_gen * self.base_mva + off)


# ---------------------------------------------------------------------------
# parsing

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11, "gencost": 5, "wind": 3}


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_table(name: str, body: str) -> np.ndarray:
    rows = []
    for chunk in re.split(r"[;\n]", body):
        tokens = [t for t in re.split(r"[\s,]+", chunk.strip()) if t]
        if tokens:
            rows.append(tokens)
    width = _MIN_COLS.get(name, 1)
    out = []
    for r, tokens in enumerate(rows, start=1):
        if name != "gencost" and len(tokens) < width:
            raise CaseParseError(
                f"mpc.{name} row {r}: expected at least {width} columns, got {len(tokens)}"
            )
        vals = []
        for c, tok in enumerate(tokens, start=1):
            try:
                vals.append(float(tok))
            except ValueError:
                raise CaseParseError(
                    f"mpc.{name} row {r} column {c}: cannot parse {tok!r} as a number"
                ) from None
        out.append(vals)
    if name == "gencost":
        return out  # ragged rows
    ncol = max((len(v) for v in out), default=width)
    arr = np.zeros((len(out), ncol))
    for i, v in enumerate(out):
        arr[i, : len(v)] = v
    return arr


def _linear_cost(row: list[float], k: int, row_no: int) -> tuple[float, float]:
    model, n = int(row[0]), int(row[3])
    if model != 2:
        raise CaseParseError(
            f"mpc.gencost row {row_no}: only polynomial costs (model 2) are supported"
        )
    coeffs = row[4 : 4 + n]
    if len(coeffs) < n:
        raise CaseParseError(f"mpc.gencost row {row_no}: expected {n} coefficients")
    if any(c != 0.0 for c in coeffs[:-2]):
        raise CaseParseError(
            f"mpc.gencost row {row_no} (generator {k + 1}): polynomial of degree "
            f"{n - 1} with nonzero higher-order terms; only linear costs are supported"
        )
    c1 = coeffs[-2] if n >= 2 else 0.0
    c0 = coeffs[-1] if n >= 1 else 0.0
    return c1, c0


def parse_case(text: str, name: str = "case") -> NetworkCase:
    """Parse MATPOWER ``mpc`` text into a validated per-unit :class:`NetworkCase`.

    Supported tables are ``bus``, ``gen``, ``branch`` and ``gencost`` plus an
    optional ``wind`` table ``[bus_label P_MW sigma_MW (pf_min)]``.  Transformer
    tap ratios and phase shifts are read but not modelled (taps = 1).
    Out-of-service branches and generators are dropped.
    """
    clean = _strip_comments(text)
    m = _SCALAR_RE.search(clean)
    if m is None:
        raise CaseParseError("mpc.baseMVA not found")
    base = float(m.group(1))
    tables = {k: _parse_table(k, body) for k, body in _TABLE_RE.findall(clean)}
    for req in ("bus", "gen", "branch", "gencost"):
        if req not in tables:
            raise CaseParseError(f"mpc.{req} table not found")

    bus_tab = tables["bus"]
    labels = [int(v) for v in bus_tab[:, 0]]
    if len(set(labels)) != len(labels):
        raise CaseValidationError("duplicate bus labels in mpc.bus")
    index = {lab: i for i, lab in enumerate(labels)}

    def resolve(label: float, where: str) -> int:
        lab = int(label)
        if lab not in index:
            raise CaseValidationError(f"{where} references bus {lab} absent from mpc.bus")
        return index[lab]

    buses = []
    for r, row in enumerate(bus_tab, start=1):
        kind = int(row[1])
        if kind not in (1, 2, 3):
            raise CaseValidationError(f"mpc.bus row {r}: unsupported bus type {kind}")
        v_min, v_max = float(row[12]), float(row[11])
        if not 0 < v_min <= v_max:
            raise CaseValidationError(f"mpc.bus row {r}: invalid voltage bounds")
        buses.append(
            Bus(
                id=labels[r - 1],
                kind=BusKind(kind),
                v_min=v_min,
                v_max=v_max,
                g_shunt=row[4] / base,
                b_shunt=row[5] / base,
                p_load=row[2] / base,
                q_load=row[3] / base,
                base_kv=float(row[9]),
                v_init=float(row[7]),
                a_init=math.radians(row[8]),
            )
        )

    gencost = tables["gencost"]
    gen_tab = tables["gen"]
    if len(gencost) < len(gen_tab):
        raise CaseParseError("mpc.gencost has fewer rows than mpc.gen")
    gens = []
    dropped_gens = 0
    for r, row in enumerate(gen_tab, start=1):
        bus = resolve(row[0], f"mpc.gen row {r}")
        c1, c0 = _linear_cost(gencost[r - 1], r - 1, r)
        if row[7] <= 0:
            dropped_gens += 1
            continue
        g = Generator(
            bus=bus,
            p_min=row[9] / base,
            p_max=row[8] / base,
            q_min=row[4] / base,
            q_max=row[3] / base,
            cost_linear=c1,
            cost_offset=c0,
            v_set=float(row[5]),
            p_init=row[1] / base,
            q_init=row[2] / base,
        )
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseValidationError(f"mpc.gen row {r}: lower bound exceeds upper bound")
        gens.append(g)

    branches = []
    dropped_br = 0
    taps = 0
    for r, row in enumerate(tables["branch"], start=1):
        f = resolve(row[0], f"mpc.branch row {r}")
        t = resolve(row[1], f"mpc.branch row {r}")
        if f == t:
            raise CaseValidationError(f"mpc.branch row {r}: from and to bus coincide")
        if row[10] <= 0:
            dropped_br += 1
            continue
        if row[2] == 0 and row[3] == 0:
            raise CaseValidationError(f"mpc.branch row {r}: zero series impedance")
        if row[8] not in (0.0, 1.0) or row[9] != 0.0:
            taps += 1
        branches.append(
            Branch(
                from_bus=f,
                to_bus=t,
                r=float(row[2]),
                x=float(row[3]),
                b_sh=float(row[4]),
                s_rating=row[5] / base,
                ratio=float(row[8]),
            )
        )

    winds = []
    if "wind" in tables:
        for r, row in enumerate(tables["wind"], start=1):
            pf = float(row[3]) if len(row) > 3 and row[3] > 0 else 0.95
            winds.append(
                WindFarm(
                    bus=resolve(row[0], f"mpc.wind row {r}"),
                    p_forecast=row[1] / base,
                    sigma=row[2] / base,
                    pf_min=pf,
                )
            )

    meta = {
        "source_name": name,
        "dropped_branches": dropped_br,
        "dropped_generators": dropped_gens,
        "ignored_taps": taps,
    }
    case = NetworkCase(
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(gens),
        wind_farms=tuple(winds),
        base_mva=base,
        name=name,
        metadata=meta,
    )
    validate_case(case)
    return case


def load_case(path) -> NetworkCase:
    path = Path(path)
    return parse_case(path.read_text(), name=path.stem)


def _n_islands(case: NetworkCase) -> int:
    n = case.n_bus
    adj = sp.coo_matrix((np.ones(case.n_branch), (case.f, case.t)), shape=(n, n))
    return connected_components(adj, directed=False)[0]


def validate_case(case: NetworkCase) -> None:
    slacks = [i for i, b in enumerate(case.buses) if b.kind == BusKind.SLACK]
    if len(slacks) != 1:
        raise CaseValidationError(f"expected exactly one slack bus, found {len(slacks)}")
    n = case.n_bus
    adj = sp.coo_matrix((np.ones(case.n_branch), (case.f, case.t)), shape=(n, n))
    count, labels = connected_components(adj, directed=False)
    if count > 1:
        islands = [
            sorted(case.buses[i].id for i in np.flatnonzero(labels == k)) for k in range(count)
        ]
        raise CaseValidationError(f"network is disconnected; islands: {islands}")
    for w in case.wind_farms:
        if w.sigma < 0 or not 0 < w.pf_min <= 1:
            raise CaseValidationError(f"invalid wind farm data at bus {case.buses[w.bus].id}")
    if not case.gens_at(case.slack):
        raise CaseValidationError("reference bus has no in-service generator")


def apply_modifiers(
    case: NetworkCase,
    rating_scale: float = 1.0,
    wind_additions=(),
) -> NetworkCase:
    """Scale finite line ratings and attach wind farms at external bus labels."""
    if not 0 < rating_scale <= 1:
        raise CaseValidationError("rating_scale must lie in (0, 1]")
    branches = tuple(replace(br, s_rating=br.s_rating * rating_scale) for br in case.branches)
    winds = list(case.wind_farms)
    for add in wind_additions:
        if add.bus_label not in case.bus_index:
            raise CaseValidationError(f"wind farm bus {add.bus_label} not present in case")
        winds.append(
            WindFarm(
                bus=case.bus_index[add.bus_label],
                p_forecast=add.p_mw / case.base_mva,
                sigma=add.sigma_mw / case.base_mva,
                pf_min=add.pf_min,
            )
        )
    meta = dict(case.metadata, rating_scale=rating_scale * case.metadata.get("rating_scale", 1.0))
    out = replace(case, branches=branches, wind_farms=tuple(winds), metadata=meta)
    validate_case(out)
    return out


# ---------------------------------------------------------------------------
# admittances


@dataclass(frozen=True)
class BranchAdmittances:
    """Series admittance per branch and the bus-admittance diagonal.

    ``g``, ``b`` are the series conductance/susceptance of each branch, so the
    off-diagonal bus-admittance entries are ``-g`` and ``-b``.  ``b_sh`` is the
    total charging susceptance (half at each terminal).
    """

    g: np.ndarray
    b: np.ndarray
    b_sh: np.ndarray
    g_ii: np.ndarray
    b_ii: np.ndarray


def branch_admittances(case: NetworkCase) -> BranchAdmittances:
    g = np.array([br.g for br in case.branches])
    b = np.array([br.b for br in case.branches])
    bsh = np.array([br.b_sh for br in case.branches])
    g_ii = np.array([bus.g_shunt for bus in case.buses])
    b_ii = np.array([bus.b_shunt for bus in case.buses])
    np.add.at(g_ii, case.f, g)
    np.add.at(g_ii, case.t, g)
    np.add.at(b_ii, case.f, b + bsh / 2)
    np.add.at(b_ii, case.t, b + bsh / 2)
    return BranchAdmittances(g=g, b=b, b_sh=bsh, g_ii=g_ii, b_ii=b_ii)


def make_ybus(case: NetworkCase):
    """Complex bus admittance matrix and from/to branch admittance matrices."""
    adm = branch_admittances(case)
    ys = adm.g + 1j * adm.b
    ych = 0.5j * adm.b_sh
    n, nl = case.n_bus, case.n_branch
    f, t = case.f, case.t
    yff = ys + ych
    yft = -ys
    rows = np.r_[np.arange(nl), np.arange(nl)]
    yf = sp.csr_matrix((np.r_[yff, yft], (rows, np.r_[f, t])), shape=(nl, n))
    yt = sp.csr_matrix((np.r_[yft, yff], (rows, np.r_[f, t])), shape=(nl, n))
    ysh = np.array([bus.g_shunt + 1j * bus.b_shunt for bus in case.buses])
    cf = sp.csr_matrix((np.ones(nl), (np.arange(nl), f)), shape=(nl, n))
    ct = sp.csr_matrix((np.ones(nl), (np.arange(nl), t)), shape=(nl, n))
    ybus = (cf.T @ yf + ct.T @ yt + sp.diags(ysh)).tocsr()
    return ybus, yf, yt


def lifted_flows(case: NetworkCase, u, c, s, adm: BranchAdmittances | None = None) -> np.ndarray:
    """Branch flows in lifted variables, columns ``P_ij, Q_ij, P_ji, Q_ji``.

    With off-diagonal admittances ``G = -g`` and ``B = -b`` and half charging
    ``Bsh = b_sh / 2``::

        P_ij = -G u_i + G c - B s        Q_ij = (B - Bsh) u_i - B c - G s
        P_ji = -G u_j + G c + B s        Q_ji = (B - Bsh) u_j - B c + G s
    """
    adm = branch_admittances(case) if adm is None else adm
    u = np.asarray(u, float)
    c = np.asarray(c, float)
    s = np.asarray(s, float)
    G, B, Bsh = -adm.g, -adm.b, adm.b_sh / 2
    ui, uj = u[case.f], u[case.t]
    return np.column_stack([
        -G * ui + G * c - B * s,
        (B - Bsh) * ui - B * c - G * s,
        -G * uj + G * c + B * s,
        (B - Bsh) * uj - B * c + G * s,
    ])


# ---------------------------------------------------------------------------
# serialization


def _fmt(v: float) -> str:
    return repr(float(v)) if v != int(v) or abs(v) > 1e15 else str(int(v))


def to_matpower(case: NetworkCase) -> str:
    """Serialize back to MATPOWER text (MW/MVA units) that reparses losslessly."""
    base = case.base_mva
    lines = [f"function mpc = {case.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};"]
    lines.append("mpc.bus = [")
    for b in case.buses:
        row = [b.id, int(b.kind), b.p_load * base, b.q_load * base, b.g_shunt * base,
               b.b_shunt * base, 1, b.v_init, math.degrees(b.a_init), b.base_kv, 1,
               b.v_max, b.v_min]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines.append("];")
    lines.append("mpc.gen = [")
    for g in case.generators:
        row = [case.buses[g.bus].id, g.p_init * base, g.q_init * base, g.q_max * base,
               g.q_min * base, g.v_set, base, 1, g.p_max * base, g.p_min * base]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines.append("];")
    lines.append("mpc.branch = [")
    for br in case.branches:
        row = [case.buses[br.from_bus].id, case.buses[br.to_bus].id, br.r, br.x, br.b_sh,
               br.s_rating * base, 0, 0, br.ratio, 0, 1, -360, 360]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines.append("];")
    lines.append("mpc.gencost = [")
    for g in case.generators:
        row = [2, 0, 0, 2, g.cost_linear, g.cost_offset]
        lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    lines.append("];")
    if case.wind_farms:
        lines.append("mpc.wind = [")
        for w in case.wind_farms:
            row = [case.buses[w.bus].id, w.p_forecast * base, w.sigma * base, w.pf_min]
            lines.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
        lines.append("];")
    return "\n".join(lines) + "\n"


def case_to_dict(case: NetworkCase) -> dict:
    """Canonical JSON-ready dump (per-unit values, internal indexing)."""

    def rec(obj):
        d = {k: getattr(obj, k) for k in obj.__dataclass_fields__}
        return {k: (int(v) if isinstance(v, enum.IntEnum) else v) for k, v in d.items()}

    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "metadata": case.metadata,
        "buses": [rec(b) for b in case.buses],
        "branches": [rec(b) for b in case.branches],
        "generators": [rec(g) for g in case.generators],
        "wind_farms": [rec(w) for w in case.wind_farms],
    }


def dump_case_json(case: NetworkCase) -> str:
    return json.dumps(case_to_dict(case), indent=1, sort_keys=True)
