"""Per-unit network model: buses, branches, admittance matrix, file ingestion.

The native document format is JSON::

    {
      "base_mva": 1.0,
      "buses": [
        {"id": 1, "role": "slack", "v_set": 1.0, "theta_set": 0.0,
         "p_nom": 0.0, "q_nom": 0.0, "shunt_g": 0.0, "shunt_b": 0.0},
        {"id": 2, "role": "load", "p_nom": -0.02, "q_nom": -0.008}
      ],
      "branches": [{"from": 1, "to": 2, "r": 0.01, "x": 0.2}]
    }

All electrical quantities are per-unit on ``base_mva`` and angles are in
radians.  Power injections follow the generation-positive convention, so
loads carry negative ``p_nom``/``q_nom``.  Bus ids are remapped to the
contiguous range 1..n on parse; the original ids are retained on the
``Network`` for reporting but take no part in equality.

A restricted MATPOWER case-text importer is provided for interop.  The
supported subset is bus id/type/Pd/Qd/Gs/Bs/Vm/Va plus branch
from/to/r/x; anything electrically meaningful outside the subset
(transformer taps, phase shifters, line charging, PV buses, generators at
non-slack buses, out-of-service branches) raises instead of being
silently dropped.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

SLACK = "slack"
LOAD = "load"


class NetworkFormatError(ValueError):
    """A network document violates the format or a model invariant."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Bus:
    """One electric bus: shunt admittance, nominal injection, role."""

    id: int
    role: str
    p_nom: float = 0.0
    q_nom: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    v_set: float | None = None
    theta_set: float | None = None


@dataclass(frozen=True)
class Branch:
    """Series branch between two buses, given as per-unit r + jx."""

    from_bus: int
    to_bus: int
    r: float
    x: float

    @property
    def y_series(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Network:
    """Validated, immutable network.

    Bus ids are 1..n and index arrays as ``id - 1``.  Exactly one bus is
    the slack; the graph is connected; ``original_ids[i]`` is the id bus
    ``i + 1`` carried in the source document.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 1.0
    original_ids: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        _validate_network(self.buses, self.branches)
        if not self.original_ids:
            object.__setattr__(self, "original_ids", tuple(b.id for b in self.buses))

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def slack_index(self) -> int:
        """0-based index of the slack bus."""
        return next(i for i, b in enumerate(self.buses) if b.role == SLACK)

    @property
    def load_indices(self) -> tuple[int, ...]:
        """0-based indices of the non-slack buses, ascending."""
        return tuple(i for i, b in enumerate(self.buses) if b.role != SLACK)

    def p_nom_vector(self) -> np.ndarray:
        return np.array([b.p_nom for b in self.buses])

    def q_nom_vector(self) -> np.ndarray:
        return np.array([b.q_nom for b in self.buses])

    def shunt_vector(self) -> np.ndarray:
        return np.array([complex(b.shunt_g, b.shunt_b) for b in self.buses])


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense nodal admittance matrix Y (n x n, complex, symmetric)."""

    Y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Y", _readonly(np.asarray(self.Y, dtype=complex)))


def _validate_network(buses, branches) -> None:
    if len(buses) < 2:
        raise NetworkFormatError(f"degenerate network: n={len(buses)} < 2 buses")
    ids = [b.id for b in buses]
    if ids != list(range(1, len(buses) + 1)):
        raise NetworkFormatError(f"bus ids not contiguous 1..n: {ids}")
    slack_ids = [b.id for b in buses if b.role == SLACK]
    if len(slack_ids) == 0:
        raise NetworkFormatError("no slack bus defined")
    if len(slack_ids) > 1:
        raise NetworkFormatError(f"multiple slack buses: {slack_ids}")
    for b in buses:
        if b.role not in (SLACK, LOAD):
            raise NetworkFormatError(f"bus {b.id}: unknown role {b.role!r}")
        if b.role == LOAD and (b.v_set is not None or b.theta_set is not None):
            raise NetworkFormatError(f"bus {b.id}: v_set/theta_set allowed on the slack bus only")
    id_set = set(ids)
    adj: dict[int, list[int]] = {i: [] for i in ids}
    for k, br in enumerate(branches):
        if br.from_bus not in id_set or br.to_bus not in id_set:
            raise NetworkFormatError(f"branches[{k}]: unknown bus id in ({br.from_bus}, {br.to_bus})")
        if br.from_bus == br.to_bus:
            raise NetworkFormatError(f"branches[{k}]: self loop at bus {br.from_bus}")
        if br.r == 0.0 and br.x == 0.0:
            raise NetworkFormatError(f"branches[{k}]: zero-impedance branch {br.from_bus}-{br.to_bus}")
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    seen = {ids[0]}
    queue = deque(seen)
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if len(seen) != len(ids):
        missing = sorted(id_set - seen)
        raise NetworkFormatError(f"disconnected graph: buses {missing} unreachable from bus {ids[0]}")


def _get(obj: dict, key: str, where: str, kind=float, required=True, default=None):
    if key not in obj:
        if required:
            raise NetworkFormatError(f"{where}: missing field {key!r}")
        return default
    try:
        return kind(obj[key])
    except (TypeError, ValueError) as exc:
        raise NetworkFormatError(f"{where}: bad value for {key!r}: {obj[key]!r}") from exc


def parse_network(text: str) -> Network:
    """Parse a native-format JSON document into a validated :class:`Network`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise NetworkFormatError("top-level document must be a JSON object")
    base_mva = _get(doc, "base_mva", "document", required=False, default=1.0)
    raw_buses = doc.get("buses")
    raw_branches = doc.get("branches", [])
    if not isinstance(raw_buses, list) or not raw_buses:
        raise NetworkFormatError("document: 'buses' must be a non-empty list")

    seen_ids: set[int] = set()
    parsed = []
    for i, rb in enumerate(raw_buses):
        where = f"buses[{i}]"
        bid = _get(rb, "id", where, kind=int)
        if bid in seen_ids:
            raise NetworkFormatError(f"{where}: duplicate bus id {bid}")
        seen_ids.add(bid)
        role = _get(rb, "role", where, kind=str)
        bus = dict(
            id=bid,
            role=role,
            p_nom=_get(rb, "p_nom", where, required=False, default=0.0),
            q_nom=_get(rb, "q_nom", where, required=False, default=0.0),
            shunt_g=_get(rb, "shunt_g", where, required=False, default=0.0),
            shunt_b=_get(rb, "shunt_b", where, required=False, default=0.0),
            v_set=_get(rb, "v_set", where, required=False),
            theta_set=_get(rb, "theta_set", where, required=False),
        )
        if role == SLACK:
            bus["v_set"] = 1.0 if bus["v_set"] is None else bus["v_set"]
            bus["theta_set"] = 0.0 if bus["theta_set"] is None else bus["theta_set"]
        parsed.append(bus)

    # remap ids to 1..n, ascending in the original id order
    order = sorted(range(len(parsed)), key=lambda i: parsed[i]["id"])
    original_ids = tuple(parsed[i]["id"] for i in order)
    id_map = {parsed[i]["id"]: new + 1 for new, i in enumerate(order)}
    buses = tuple(Bus(**{**parsed[i], "id": id_map[parsed[i]["id"]]}) for i in order)

    branches = []
    for k, rb in enumerate(raw_branches):
        where = f"branches[{k}]"
        f = _get(rb, "from", where, kind=int)
        t = _get(rb, "to", where, kind=int)
        if f not in id_map or t not in id_map:
            raise NetworkFormatError(f"{where}: unknown bus id in ({f}, {t})")
        branches.append(
            Branch(id_map[f], id_map[t], _get(rb, "r", where), _get(rb, "x", where))
        )
    return Network(buses, tuple(branches), base_mva=base_mva, original_ids=original_ids)


def serialize_network(net: Network) -> str:
    """Dump a :class:`Network` back to the native JSON format."""
    doc = {
        "base_mva": net.base_mva,
        "buses": [
            {
                "id": b.id,
                "role": b.role,
                "p_nom": b.p_nom,
                "q_nom": b.q_nom,
                "shunt_g": b.shunt_g,
                "shunt_b": b.shunt_b,
                **({"v_set": b.v_set, "theta_set": b.theta_set} if b.role == SLACK else {}),
            }
            for b in net.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x} for br in net.branches
        ],
    }
    return json.dumps(doc, indent=2)


def load_network(path) -> Network:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_network(fh.read())


def bundled_feeder6() -> Network:
    """The bundled 6-bus line-topology test feeder."""
    text = resources.files("sase").joinpath("data/feeder6.json").read_text()
    return parse_network(text)


# --- MATPOWER case-text import -------------------------------------------

_MATRIX_RE = r"mpc\.%s\s*=\s*\[(.*?)\];"


def _matpower_matrix(content: str, name: str) -> list[list[float]]:
    m = re.search(_MATRIX_RE % name, content, re.DOTALL)
    if m is None:
        raise NetworkFormatError(f"matpower case: missing mpc.{name} block")
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].replace(";", " ").strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise NetworkFormatError(f"matpower case: bad row in mpc.{name}: {line!r}") from exc
    return rows


def import_matpower_case(text: str) -> Network:
    """Import the supported subset of the MATPOWER case text format.

    Pd/Qd are converted to per-unit negative injections on baseMVA; Gs/Bs
    become per-unit bus shunts; bus type 3 maps to the slack (Vm, Va with
    Va in degrees).  Unsupported features raise with the feature named.
    """
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9eE.+-]+)\s*;", text)
    if m is None:
        raise NetworkFormatError("matpower case: missing mpc.baseMVA")
    base_mva = float(m.group(1))
    if base_mva <= 0:
        raise NetworkFormatError(f"matpower case: baseMVA must be positive, got {base_mva}")

    raw_bus = _matpower_matrix(text, "bus")
    raw_branch = _matpower_matrix(text, "branch")

    buses = []
    for row in raw_bus:
        if len(row) < 9:
            raise NetworkFormatError(f"matpower case: bus row too short: {row}")
        bid, btype = int(row[0]), int(row[1])
        pd, qd, gs, bs, vm, va = row[2], row[3], row[4], row[5], row[7], row[8]
        if btype == 3:
            buses.append(
                dict(id=bid, role=SLACK, p_nom=0.0, q_nom=0.0,
                     shunt_g=gs / base_mva, shunt_b=bs / base_mva,
                     v_set=vm, theta_set=float(np.deg2rad(va)))
            )
        elif btype == 1:
            buses.append(
                dict(id=bid, role=LOAD, p_nom=-pd / base_mva, q_nom=-qd / base_mva,
                     shunt_g=gs / base_mva, shunt_b=bs / base_mva)
            )
        elif btype == 2:
            raise NetworkFormatError(f"unsupported feature: PV bus (bus {bid})")
        else:
            raise NetworkFormatError(f"unsupported feature: bus type {btype} (bus {bid})")

    branches = []
    for k, row in enumerate(raw_branch):
        if len(row) < 4:
            raise NetworkFormatError(f"matpower case: branch row too short: {row}")
        f, t, r, x = int(row[0]), int(row[1]), row[2], row[3]
        if len(row) > 4 and row[4] != 0.0:
            raise NetworkFormatError(f"unsupported feature: line charging susceptance (branch {k})")
        if len(row) > 8 and row[8] != 0.0:
            raise NetworkFormatError(f"unsupported feature: tap ratio (branch {k})")
        if len(row) > 9 and row[9] != 0.0:
            raise NetworkFormatError(f"unsupported feature: phase shift (branch {k})")
        if len(row) > 10 and row[10] == 0.0:
            raise NetworkFormatError(f"unsupported feature: out-of-service branch (branch {k})")
        branches.append({"from": f, "to": t, "r": r, "x": x})

    gen_match = re.search(_MATRIX_RE % "gen", text, re.DOTALL)
    if gen_match is not None:
        slack_ids = {b["id"] for b in buses if b["role"] == SLACK}
        for row in _matpower_matrix(text, "gen"):
            gbus = int(row[0])
            if gbus not in slack_ids:
                raise NetworkFormatError(f"unsupported feature: generator at non-slack bus {gbus}")

    doc = json.dumps({"base_mva": base_mva, "buses": buses, "branches": branches})
    return parse_network(doc)


def build_admittance(net: Network) -> AdmittanceMatrix:
    """Assemble Y: off-diagonal (h,k) is -y_hk, diagonal is shunt + row sum."""
    n = net.n
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        y = br.y_series
        i, j = br.from_bus - 1, br.to_bus - 1
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    Y[np.diag_indices(n)] += net.shunt_vector()
    return AdmittanceMatrix(Y)
