"""`.g3` volume files and the on-disk case directory layout.

A ``.g3`` file is one line of minified JSON (dims, spacing, origin, dtype)
followed by ``nx*ny*nz`` little-endian float32 values, x fastest.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .volcore import CaseBundle, Geometry, Grid3, StructureSet

G3_DTYPE = "f32le"


class VolumeFormatError(ValueError):
    pass


def write_g3(path, grid: Grid3) -> None:
    g = grid.geometry
    header = {"dims": list(g.dims), "spacing": list(g.spacing),
              "origin": list(g.origin), "dtype": G3_DTYPE}
    data = np.asarray(grid.values, dtype="<f4").ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(data.tobytes())


def read_g3(path) -> Grid3:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: bad header: {exc}") from exc
    if header.get("dtype") != G3_DTYPE:
        raise VolumeFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    geo = Geometry(tuple(header["dims"]), tuple(header["spacing"]), tuple(header["origin"]))
    body = raw[nl + 1:]
    if len(body) != 4 * geo.size:
        raise VolumeFormatError(f"{path}: expected {4 * geo.size} data bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return Grid3(geo, values.reshape(geo.dims, order="F"))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_beams(path, beams) -> None:
    write_json(path, {"angles_deg": [float(a) for a in beams.angles_deg],
                      "iso_mm": [float(c) for c in beams.isocenter],
                      "sad_mm": float(beams.sad), "margin_mm": float(beams.margin)})


def read_beams(path):
    from .beamsim import BeamSpec

    d = read_json(path)
    return BeamSpec(tuple(d["angles_deg"]), tuple(d["iso_mm"]),
                    sad=d.get("sad_mm", 1000.0), margin=d.get("margin_mm", 5.0))


def case_dir_name(case_id) -> str:
    return f"case_{case_id}"


def write_case(root, case: CaseBundle, perturbed: Grid3 | None = None,
               meta_extra: dict | None = None) -> Path:
    """Write ``case`` as ``root/case_<id>/`` and return that path."""
    d = Path(root) / case_dir_name(case.case_id)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    write_g3(d / "ct.g3", case.ct)
    for name, m in case.structures.masks.items():
        write_g3(d / "masks" / f"{name}.g3", Grid3(case.structures.geometry, m.astype(np.float64)))
    write_beams(d / "beams.json", case.beams)
    doses = dict(case.extra_doses)
    doses[case.provenance] = case.reference_dose
    if perturbed is not None:
        doses["perturbed"] = perturbed
    for tag, g in doses.items():
        write_g3(d / f"dose_{tag}.g3", g)
    if case.beam_dose is not None:
        write_g3(d / "beam.g3", case.beam_dose)
    if case.body is not None:
        write_g3(d / "body.g3", Grid3(case.ct.geometry, case.body.astype(np.float64)))
    meta = {"case_id": str(case.case_id), "prescription_gy": case.prescription,
            "plans": sorted(doses)}
    meta.update(meta_extra or {})
    write_json(d / "meta.json", meta)
    return d


def read_case(case_dir, plan: str = "consistent") -> CaseBundle:
    d = Path(case_dir)
    meta = read_json(d / "meta.json")
    ct = read_g3(d / "ct.g3")
    masks = {p.stem: read_g3(p).values for p in sorted((d / "masks").glob("*.g3"))}
    structures = StructureSet(ct.geometry, masks)
    dose_path = d / f"dose_{plan}.g3"
    if not dose_path.exists():
        raise FileNotFoundError(f"{dose_path} not found")
    extra = {}
    for p in sorted(d.glob("dose_*.g3")):
        tag = p.stem[len("dose_"):]
        if tag != plan:
            extra[tag] = read_g3(p)
    beam = read_g3(d / "beam.g3") if (d / "beam.g3").exists() else None
    return CaseBundle(ct=ct, structures=structures, beams=read_beams(d / "beams.json"),
                      reference_dose=read_g3(dose_path), case_id=str(meta["case_id"]),
                      provenance=plan, prescription=float(meta.get("prescription_gy", 60.0)),
                      beam_dose=beam, extra_doses=extra, body=read_body(d))


def read_body(case_dir) -> np.ndarray | None:
    p = Path(case_dir) / "body.g3"
    return read_g3(p).values.astype(bool) if p.exists() else None


def list_cases(root) -> list[Path]:
    """Case directories under ``root`` sorted by case id (numeric ids numerically)."""
    dirs = [p for p in Path(root).glob("case_*") if p.is_dir()]

    def key(p):
        cid = p.name[len("case_"):]
        return (0, int(cid), "") if cid.isdigit() else (1, 0, cid)

    return sorted(dirs, key=key)
