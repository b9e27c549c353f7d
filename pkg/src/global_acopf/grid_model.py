"""Power network data model, case-file parsers and branch admittances.

All quantities are stored in per unit on the system base; costs are per
unit of p.u. power (so a MATPOWER linear cost c1 [$/MWh] becomes
c1 * baseMVA).
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)


class CaseError(ValueError):
    """Base class for problems with case data."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CaseSemanticError(CaseError):
    pass


class UnsupportedFeatureError(CaseError):
    pass


class SchemaError(CaseError):
    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    p_load: float = 0.0
    q_load: float = 0.0
    g_sh: float = 0.0
    b_sh: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_lin: float
    cost_quad: float = 0.0
    cost_const: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    p_max: float = math.inf

    @property
    def admittance(self) -> tuple[float, float]:
        return line_admittance(self.r, self.x)


@dataclass(frozen=True)
class PowerNetwork:
    buses: tuple
    gens: tuple
    lines: tuple
    ref_bus: int
    base_mva: float = 100.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "gens", tuple(self.gens))
        object.__setattr__(self, "lines", tuple(self.lines))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self) -> dict[int, int]:
        """Map external bus id -> 0-based position."""
        return {b.id: k for k, b in enumerate(self.buses)}

    def ref_index(self) -> int:
        return self.bus_index()[self.ref_bus]


def line_admittance(r: float, x: float) -> tuple[float, float]:
    """Series conductance and susceptance of a line: g = r/|z|^2, b = -x/|z|^2."""
    den = r * r + x * x
    if den == 0.0:
        raise CaseSemanticError("zero-impedance line (r = x = 0)")
    return r / den, -x / den


# ------------------------------------------------------------------ validation


def validate(net: PowerNetwork) -> PowerNetwork:
    ids = [b.id for b in net.buses]
    if len(ids) == 0:
        raise CaseSemanticError("network has no buses")
    if len(set(ids)) != len(ids):
        raise CaseSemanticError("duplicate bus ids")
    idset = set(ids)
    for b in net.buses:
        if not (0 < b.v_min <= b.v_max):
            raise CaseSemanticError(f"bus {b.id}: need 0 < v_min <= v_max, got {b.v_min}, {b.v_max}")
        for name in ("p_load", "q_load", "g_sh", "b_sh"):
            if not math.isfinite(getattr(b, name)):
                raise CaseSemanticError(f"bus {b.id}: {name} is not finite")
    if net.ref_bus not in idset:
        raise CaseSemanticError(f"reference bus {net.ref_bus} is not a declared bus")
    for k, g in enumerate(net.gens):
        if g.bus not in idset:
            raise CaseSemanticError(f"generator {k + 1} sits on undeclared bus {g.bus}")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseSemanticError(f"generator {k + 1}: inverted dispatch bounds")
        if g.cost_quad < 0:
            raise CaseSemanticError(f"generator {k + 1}: quadratic cost must be nonnegative")
    for k, ln in enumerate(net.lines):
        if ln.from_bus not in idset or ln.to_bus not in idset:
            raise CaseSemanticError(f"line {k + 1} ({ln.from_bus}-{ln.to_bus}) references an undeclared bus")
        if ln.from_bus == ln.to_bus:
            raise CaseSemanticError(f"line {k + 1} is a self loop")
        if not ln.p_max > 0:
            raise CaseSemanticError(f"line {k + 1}: p_max must be positive")
        try:
            line_admittance(ln.r, ln.x)
        except CaseSemanticError as exc:
            raise CaseSemanticError(f"line {k + 1}: {exc}") from None
    # connectivity by union-find
    parent = {i: i for i in ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ln in net.lines:
        parent[find(ln.from_bus)] = find(ln.to_bus)
    roots = {find(i) for i in ids}
    if len(roots) > 1:
        raise CaseSemanticError(f"network graph is disconnected ({len(roots)} islands)")
    return net


# ------------------------------------------------------------------- MATPOWER

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_tables(text: str) -> tuple[dict, dict]:
    """Return ({name: (rows, first_line_numbers)}, {name: scalar})."""
    tables: dict = {}
    scalars: dict = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = _strip_comment(lines[i]).strip()
        lineno = i + 1
        i += 1
        if not raw:
            continue
        m = _ASSIGN.match(raw)
        if not m:
            continue
        name, rest = m.group(1), m.group(2).strip()
        if rest.startswith("["):
            body = rest[1:]
            rows, nums = [], []
            closed = False
            cur_line = lineno
            chunk = body
            while True:
                end = chunk.find("]")
                part = chunk if end < 0 else chunk[:end]
                for piece in part.split(";"):
                    toks = piece.replace(",", " ").split()
                    if toks:
                        try:
                            rows.append([float(t) for t in toks])
                        except ValueError:
                            bad = next(t for t in toks if not _is_number(t))
                            raise CaseSyntaxError(f"invalid number {bad!r} in mpc.{name}", cur_line) from None
                        nums.append(cur_line)
                if end >= 0:
                    closed = True
                    break
                if i >= len(lines):
                    break
                chunk = _strip_comment(lines[i])
                cur_line = i + 1
                i += 1
            if not closed:
                raise CaseSyntaxError(f"unterminated matrix mpc.{name}", lineno)
            widths = {len(r) for r in rows}
            if len(widths) > 1:
                for r, ln in zip(rows, nums):
                    if len(r) != len(rows[0]):
                        raise CaseSyntaxError(f"ragged row in mpc.{name}", ln)
            tables[name] = (rows, nums)
        else:
            val = rest.rstrip(";").strip()
            if val.startswith("'") or val.startswith('"'):
                scalars[name] = val.strip("'\"")
            else:
                try:
                    scalars[name] = float(val)
                except ValueError:
                    raise CaseSyntaxError(f"cannot parse value of mpc.{name}", lineno) from None
    return tables, scalars


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def parse_matpower(text: str, name: str = "") -> PowerNetwork:
    """Parse a MATPOWER (version 2) case into a validated network."""
    tables, scalars = _parse_tables(text)
    for req in ("bus", "gen", "branch", "gencost"):
        if req not in tables:
            raise CaseSyntaxError(f"missing mpc.{req} table")
    if "baseMVA" not in scalars:
        raise CaseSyntaxError("missing mpc.baseMVA")
    base = float(scalars["baseMVA"])
    if base <= 0:
        raise CaseSemanticError("baseMVA must be positive")

    bus_rows, bus_lines = tables["bus"]
    buses = []
    ref = None
    for row, ln in zip(bus_rows, bus_lines):
        if len(row) < 13:
            raise CaseSyntaxError("bus row needs 13 columns", ln)
        bid = int(row[0])
        if int(row[1]) == 4:
            continue  # isolated bus
        if int(row[1]) == 3:
            if ref is not None:
                raise CaseSemanticError(f"more than one reference bus (line {ln})")
            ref = bid
        buses.append(Bus(id=bid, v_min=row[12], v_max=row[11], p_load=row[2] / base, q_load=row[3] / base,
                         g_sh=row[4] / base, b_sh=row[5] / base))
    if ref is None:
        raise CaseSemanticError("no reference (type 3) bus")

    gen_rows, gen_lines = tables["gen"]
    cost_rows, cost_lines = tables["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise CaseSemanticError("mpc.gencost has fewer rows than mpc.gen")
    gens = []
    for row, ln, crow, cln in zip(gen_rows, gen_lines, cost_rows, cost_lines):
        if len(row) < 10:
            raise CaseSyntaxError("gen row needs at least 10 columns", ln)
        if row[7] <= 0:
            continue
        model, ncost = int(crow[0]), int(crow[3])
        if model != 2:
            raise UnsupportedFeatureError(f"line {cln}: only polynomial (model 2) costs are supported")
        coeffs = crow[4:4 + ncost]
        if len(coeffs) != ncost:
            raise CaseSyntaxError("gencost row shorter than its NCOST", cln)
        if ncost > 3 and any(c != 0 for c in coeffs[: ncost - 3]):
            raise UnsupportedFeatureError(f"line {cln}: cost polynomials above degree 2 are not supported")
        c = list(reversed(coeffs)) + [0.0, 0.0, 0.0]  # c[0] const, c[1] lin, c[2] quad
        gens.append(Generator(bus=int(row[0]), p_min=row[9] / base, p_max=row[8] / base, q_min=row[4] / base,
                              q_max=row[3] / base, cost_lin=c[1] * base, cost_quad=c[2] * base * base,
                              cost_const=c[0]))

    br_rows, br_lines = tables["branch"]
    lines = []
    extra_b: dict[int, float] = {}
    for row, ln in zip(br_rows, br_lines):
        if len(row) < 11:
            raise CaseSyntaxError("branch row needs at least 11 columns", ln)
        if row[10] <= 0:
            continue
        tap, shift = row[8], row[9]
        if (tap not in (0.0, 1.0)) or shift != 0.0:
            raise UnsupportedFeatureError(f"line {ln}: transformer taps/phase shifts are not supported")
        rate = row[5]
        if rate > 0:
            p_max = rate / base
        else:
            p_max = math.inf
        if row[2] == 0 and row[3] == 0:
            raise CaseSemanticError(f"line {ln}: zero-impedance branch")
        f, t = int(row[0]), int(row[1])
        lines.append(Line(from_bus=f, to_bus=t, r=row[2], x=row[3], p_max=p_max))
        if row[4] != 0:
            extra_b[f] = extra_b.get(f, 0.0) + row[4] / 2.0
            extra_b[t] = extra_b.get(t, 0.0) + row[4] / 2.0
    if any(math.isfinite(ln.p_max) for ln in lines):
        log.warning("branch MVA ratings are used as active-power limits (apparent-power limits are not modelled)")
    if extra_b:
        buses = [Bus(b.id, b.v_min, b.v_max, b.p_load, b.q_load, b.g_sh, b.b_sh + extra_b.get(b.id, 0.0))
                 for b in buses]
    net = PowerNetwork(buses=buses, gens=gens, lines=lines, ref_bus=ref, base_mva=base,
                       name=name or str(scalars.get("name", "")))
    return validate(net)


# --------------------------------------------------------------------- native


def _schema() -> dict:
    return json.loads(resources.files("global_acopf").joinpath("network.schema.json").read_text())


def _check_schema(doc) -> None:
    try:
        import jsonschema
    except ImportError:  # pragma: no cover
        jsonschema = None
    if jsonschema is None:
        return
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise SchemaError(err.message, pointer)


def _num(v) -> float:
    # JSON has no infinity; null stands for "no limit"
    return math.inf if v is None else float(v)


def parse_native(json_text: str) -> PowerNetwork:
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    _check_schema(doc)
    buses = [Bus(id=int(b["id"]), v_min=b["v_min"], v_max=b["v_max"], p_load=b.get("p_load", 0.0),
                 q_load=b.get("q_load", 0.0), g_sh=b.get("g_sh", 0.0), b_sh=b.get("b_sh", 0.0))
             for b in doc["buses"]]
    gens = [Generator(bus=int(g["bus"]), p_min=g["p_min"], p_max=g["p_max"], q_min=g["q_min"], q_max=g["q_max"],
                      cost_lin=g["cost_lin"], cost_quad=g.get("cost_quad", 0.0), cost_const=g.get("cost_const", 0.0))
            for g in doc["gens"]]
    lines = [Line(from_bus=int(ln["from"]), to_bus=int(ln["to"]), r=ln["r"], x=ln["x"], p_max=_num(ln.get("p_max")))
             for ln in doc["lines"]]
    net = PowerNetwork(buses=buses, gens=gens, lines=lines, ref_bus=int(doc["ref_bus"]),
                       base_mva=float(doc.get("base_mva", 100.0)), name=doc.get("name", ""))
    return validate(net)


def to_native(net: PowerNetwork) -> dict:
    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "ref_bus": net.ref_bus,
        "buses": [asdict(b) for b in net.buses],
        "gens": [asdict(g) for g in net.gens],
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x,
                   "p_max": ln.p_max if math.isfinite(ln.p_max) else None} for ln in net.lines],
    }


def export_native(net: PowerNetwork, indent: Optional[int] = 2) -> str:
    return json.dumps(to_native(net), indent=indent)


def export_matpower(net: PowerNetwork) -> str:
    """Write a MATPOWER case that parses back to ``net``."""
    base = net.base_mva
    out = ["function mpc = case_export", "mpc.version = '2';", f"mpc.baseMVA = {base!r};", "mpc.bus = ["]
    for b in net.buses:
        kind = 3 if b.id == net.ref_bus else 1
        out.append(f"\t{b.id}\t{kind}\t{b.p_load * base!r}\t{b.q_load * base!r}\t{b.g_sh * base!r}\t"
                   f"{b.b_sh * base!r}\t1\t1.0\t0.0\t1.0\t1\t{b.v_max!r}\t{b.v_min!r};")
    out += ["];", "mpc.gen = ["]
    for g in net.gens:
        out.append(f"\t{g.bus}\t0\t0\t{g.q_max * base!r}\t{g.q_min * base!r}\t1.0\t{base!r}\t1\t"
                   f"{g.p_max * base!r}\t{g.p_min * base!r};")
    out += ["];", "mpc.branch = ["]
    for ln in net.lines:
        rate = ln.p_max * base if math.isfinite(ln.p_max) else 0.0
        out.append(f"\t{ln.from_bus}\t{ln.to_bus}\t{ln.r!r}\t{ln.x!r}\t0\t{rate!r}\t0\t0\t0\t0\t1\t-360\t360;")
    out += ["];", "mpc.gencost = ["]
    for g in net.gens:
        out.append(f"\t2\t0\t0\t3\t{g.cost_quad / base / base!r}\t{g.cost_lin / base!r}\t{g.cost_const!r};")
    out += ["];", ""]
    return "\n".join(out)


def networks_equal(a: PowerNetwork, b: PowerNetwork, tol: float = 1e-12) -> bool:
    """Field-wise comparison with a relative tolerance on floats."""

    def close(u, v):
        if isinstance(u, float) or isinstance(v, float):
            if math.isinf(u) or math.isinf(v):
                return u == v
            return abs(u - v) <= tol * max(1.0, abs(u), abs(v))
        return u == v

    if a.ref_bus != b.ref_bus or not close(a.base_mva, b.base_mva):
        return False
    for xs, ys in ((a.buses, b.buses), (a.gens, b.gens), (a.lines, b.lines)):
        if len(xs) != len(ys):
            return False
        for x, y in zip(xs, ys):
            if not all(close(u, v) for u, v in zip(asdict(x).values(), asdict(y).values())):
                return False
    return True


# ---------------------------------------------------------------------- files


def load_case(path_or_name: str | Path) -> PowerNetwork:
    """Load a case from a path (.m or .json) or by bundled name (e.g. ``caseWB2``)."""
    p = Path(path_or_name)
    if not p.exists():
        bundled = bundled_case_path(str(path_or_name))
        if bundled is None:
            raise FileNotFoundError(f"case file not found: {path_or_name}")
        p = bundled
    text = p.read_text()
    if p.suffix.lower() == ".json":
        return parse_native(text)
    return parse_matpower(text, name=p.stem)


def bundled_cases() -> list[str]:
    root = resources.files("global_acopf").joinpath("data")
    return sorted(Path(str(f)).stem for f in root.iterdir() if str(f).endswith(".m"))


def bundled_case_path(name: str) -> Optional[Path]:
    stem = Path(name).stem
    root = resources.files("global_acopf").joinpath("data")
    # PG-lib cases may be named with or without their "pglib_" prefix
    for cand in (root.joinpath(stem + ".m"), root.joinpath("pglib_" + stem + ".m")):
        if cand.is_file():
            return Path(str(cand))
    return None


def single_bus_network(p_load: float, q_load: float, cost_lin: float = 1.0) -> PowerNetwork:
    """Smallest valid instance: one bus carrying one generator and a load."""
    bus = Bus(id=1, v_min=0.9, v_max=1.1, p_load=p_load, q_load=q_load)
    gen = Generator(bus=1, p_min=0.0, p_max=10.0 * max(1.0, abs(p_load)), q_min=-10.0 * max(1.0, abs(q_load)),
                    q_max=10.0 * max(1.0, abs(q_load)), cost_lin=cost_lin)
    return validate(PowerNetwork(buses=[bus], gens=[gen], lines=[], ref_bus=1))
