"""Line-delimited JSON project files.

Every file starts with a header record naming the schema, the file kind and
its version; each following line is one record.  Floats are written at 12
significant digits, which makes write -> read -> write byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError
from .geometry import Ellipse, ExteriorParams, InteriorParams
from .matching import PairMatchSet, TargetTrack, TrackView
from .robust import FeatureTrack, PairGeometry
from .synthetic import Label

SCHEMA = "targetcal"
VERSION = 1
DIGITS = 12
KINDS = ("cameras", "detections", "features", "labels", "pairs", "matches", "tracks", "report", "metrics")


@dataclass
class ProjectFiles:
    """Default file names inside a project directory."""

    root: Path
    cameras: str = "cameras.jsonl"  # initial cameras
    truth: str = "truth.jsonl"  # true cameras (synthetic only)
    refined: str = "refined.jsonl"  # cameras after refinement
    calibrated: str = "calibrated.jsonl"  # cameras after calibration
    detections: str = "detections.jsonl"
    features: str = "features.jsonl"
    labels: str = "labels.jsonl"
    pairs: str = "pairs.jsonl"
    matches: str = "matches.jsonl"
    tracks: str = "tracks.jsonl"
    report: str = "report.jsonl"
    metrics: str = "metrics.jsonl"

    def path(self, name: str) -> Path:
        return Path(self.root) / getattr(self, name)


def _num(x):
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(f"{x:.{DIGITS}g}")


def clean(obj):
    """JSON-ready copy with floats rounded to the file precision."""
    if isinstance(obj, Mapping):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


def dumps(record) -> str:
    return json.dumps(clean(record), separators=(",", ":"), allow_nan=False)


def write_jsonl(path, kind: str, records: Iterable[Mapping]) -> None:
    if kind not in KINDS:
        raise InputError(f"unknown file kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [dumps({"schema": SCHEMA, "kind": kind, "version": VERSION})]
    lines += [dumps(r) for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_jsonl(path, kind: str) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: {kind} file not found")
    out = []
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise InputError(f"{path}:{n}: record is not an object")
            if n == 1:
                if rec.get("schema") != SCHEMA or rec.get("kind") != kind:
                    raise InputError(f"{path}:1: field 'kind': expected a {SCHEMA} {kind} header")
                if rec.get("version") != VERSION:
                    raise InputError(f"{path}:1: field 'version': unsupported version {rec.get('version')!r}")
                continue
            out.append(_Rec(rec, path, n))
    if not out and kind not in ("matches", "tracks", "labels"):
        raise InputError(f"{path}: no {kind} records")
    return out


class _Rec(dict):
    """A record that names its file, line and field when a value is bad."""

    def __init__(self, data, path, line):
        super().__init__(data)
        self.where = f"{path}:{line}"

    def field(self, name, conv=float, optional=False):
        if name not in self or self[name] is None:
            if optional:
                return None
            raise InputError(f"{self.where}: missing field {name!r}")
        try:
            return conv(self[name])
        except (TypeError, ValueError) as exc:
            raise InputError(f"{self.where}: field {name!r}: {exc}") from None

    def array(self, name, shape):
        a = self.field(name, lambda v: np.asarray(v, dtype=float))
        if a.shape != shape:
            raise InputError(f"{self.where}: field {name!r}: expected shape {shape}, got {a.shape}")
        return a

    def error(self, exc) -> InputError:
        return InputError(f"{self.where}: {exc}")


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


def interior_record(K: InteriorParams) -> dict:
    return {"type": "interior", "c": K.c, "xp": K.xp, "yp": K.yp, "radial": list(K.radial),
            "decentering": None if K.decentering is None else list(K.decentering)}


def exterior_record(image: int, E: ExteriorParams) -> dict:
    return {"type": "exterior", "image": int(image), "rotation": E.rotation, "center": E.center}


def write_cameras(path, interior: InteriorParams, exteriors: Mapping[int, ExteriorParams]) -> None:
    recs = [interior_record(interior)] + [exterior_record(i, exteriors[i]) for i in sorted(exteriors)]
    write_jsonl(path, "cameras", recs)


def read_cameras(path) -> tuple[InteriorParams, dict[int, ExteriorParams]]:
    interior, exteriors = None, {}
    for r in read_jsonl(path, "cameras"):
        kind = r.field("type", str)
        try:
            if kind == "interior":
                dec = r.field("decentering", lambda v: tuple(float(x) for x in v), optional=True)
                interior = InteriorParams(r.field("c"), r.field("xp"), r.field("yp"),
                                          r.field("radial", lambda v: tuple(float(x) for x in v)), dec)
            elif kind == "exterior":
                im = r.field("image", int)
                if im in exteriors:
                    raise InputError(f"duplicate image {im}")
                exteriors[im] = ExteriorParams(r.array("rotation", (3, 3)), r.array("center", (3,)))
            else:
                raise InputError(f"field 'type': unknown record type {kind!r}")
        except InputError as exc:
            if str(exc).startswith(str(r.where)):
                raise
            raise r.error(exc) from None
    if interior is None:
        raise InputError(f"{path}: no interior record")
    return interior, exteriors


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


def _theta(t: float) -> float:
    t = _num(t)
    return 0.0 if t >= math.pi else t


def write_detections(path, detections: Mapping[int, Sequence[Ellipse]]) -> None:
    recs = []
    for im in sorted(detections):
        for k, e in enumerate(detections[im]):
            recs.append({"image": int(im), "index": k, "cx": e.cx, "cy": e.cy, "a": e.a, "b": e.b,
                         "theta": _theta(e.theta)})
    write_jsonl(path, "detections", recs)


def read_detections(path) -> dict[int, list[Ellipse]]:
    out: dict[int, list[Ellipse]] = {}
    for r in read_jsonl(path, "detections"):
        im, k = r.field("image", int), r.field("index", int)
        lst = out.setdefault(im, [])
        if k != len(lst):
            raise InputError(f"{r.where}: field 'index': expected {len(lst)} for image {im}, got {k}")
        try:
            lst.append(Ellipse(r.field("cx"), r.field("cy"), r.field("a"), r.field("b"), r.field("theta")))
        except InputError as exc:
            raise r.error(exc) from None
    return out


def write_features(path, tracks: Sequence[FeatureTrack]) -> None:
    recs = []
    for t in sorted(tracks, key=lambda t: t.id):
        for im in sorted(t.observations):
            x, y = t.observations[im]
            recs.append({"track": t.id, "image": int(im), "x": x, "y": y})
    write_jsonl(path, "features", recs)


def read_features(path) -> list[FeatureTrack]:
    obs: dict = {}
    for r in read_jsonl(path, "features"):
        tid, im = r.field("track", int), r.field("image", int)
        d = obs.setdefault(tid, {})
        if im in d:
            raise InputError(f"{r.where}: field 'image': track {tid} already has image {im}")
        d[im] = np.array([r.field("x"), r.field("y")])
    return [FeatureTrack(tid, obs[tid]) for tid in sorted(obs)]


def write_labels(path, labels) -> None:
    recs = [{"image": int(l.image), "index": int(l.index), "target": l.target, "kind": l.kind}
            for l in sorted(labels, key=lambda l: (l.image, l.index))]
    write_jsonl(path, "labels", recs)


def read_label_records(path) -> list[Label]:
    return [Label(r.field("image", int), r.field("index", int), r.field("target", int, optional=True),
                  r.field("kind", str)) for r in read_jsonl(path, "labels")]


def read_labels(path) -> dict[tuple[int, int], int | None]:
    return {(lb.image, lb.index): lb.target for lb in read_label_records(path)}


# ---------------------------------------------------------------------------
# Pair geometry, matches and tracks
# ---------------------------------------------------------------------------


def write_pairs(path, pairs: Mapping[tuple[int, int], PairGeometry]) -> None:
    recs = []
    for key in sorted(pairs):
        g = pairs[key]
        recs.append({"i": int(g.i), "j": int(g.j), "F": g.F, "sigma": g.sigma})
    write_jsonl(path, "pairs", recs)


def read_pairs(path) -> dict[tuple[int, int], PairGeometry]:
    out = {}
    for r in read_jsonl(path, "pairs"):
        i, j = r.field("i", int), r.field("j", int)
        if not i < j:
            raise InputError(f"{r.where}: field 'j': pair must satisfy i < j")
        F = r.array("F", (3, 3))
        try:
            g = PairGeometry(i, j, F, r.field("sigma"))
        except (InputError, ArithmeticError) as exc:
            raise r.error(exc) from None
        g.F = F  # already normalized when written; keep the stored digits
        out[(i, j)] = g
    return out


def write_matches(path, pair_matches: Sequence[PairMatchSet]) -> None:
    recs = []
    for pm in sorted(pair_matches, key=lambda p: (p.i, p.j)):
        for k, m, s in sorted(pm.matches):
            recs.append({"i": int(pm.i), "j": int(pm.j), "k": int(k), "m": int(m), "score": s})
    write_jsonl(path, "matches", recs)


def read_matches(path) -> list[PairMatchSet]:
    groups: dict = {}
    for r in read_jsonl(path, "matches"):
        key = (r.field("i", int), r.field("j", int))
        groups.setdefault(key, []).append((r.field("k", int), r.field("m", int), r.field("score")))
    return [PairMatchSet(i, j, groups[(i, j)]) for i, j in sorted(groups)]


def write_tracks(path, tracks: Sequence[TargetTrack]) -> None:
    recs = []
    for t in sorted(tracks, key=lambda t: t.id):
        if t.point is not None:
            recs.append({"type": "point", "track": t.id, "X": np.asarray(t.point, float)})
        for im in sorted(t.views):
            v = t.views[im]
            x, y = v.center
            recs.append({"type": "view", "track": t.id, "image": int(im), "index": int(v.index),
                         "status": v.status, "x": x, "y": y, "inlier": bool(t.inlier.get(im, True)),
                         "links": sorted(int(i) for i in v.links)})
    write_jsonl(path, "tracks", recs)


def read_tracks(path, detections: Mapping[int, Sequence[Ellipse]]) -> list[TargetTrack]:
    points, views, inlier = {}, {}, {}
    for r in read_jsonl(path, "tracks"):
        tid = r.field("track", int)
        kind = r.field("type", str)
        if kind == "point":
            points[tid] = r.array("X", (3,))
            continue
        if kind != "view":
            raise InputError(f"{r.where}: field 'type': unknown record type {kind!r}")
        im, k = r.field("image", int), r.field("index", int)
        if im not in detections or not 0 <= k < len(detections[im]):
            raise InputError(f"{r.where}: field 'index': no detection {k} in image {im}")
        status = r.field("status", str)
        xy = np.array([r.field("x"), r.field("y")])
        views.setdefault(tid, {})[im] = TrackView(k, detections[im][k], xy if status == "ok" else None, status,
                                                 frozenset(r.field("links", lambda v: [int(i) for i in v])))
        inlier.setdefault(tid, {})[im] = r.field("inlier", bool)
    return [TargetTrack(tid, views[tid], points.get(tid), inlier[tid]) for tid in sorted(views)]
