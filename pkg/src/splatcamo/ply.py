"""Binary PLY persistence for Gaussian scenes.

The on-disk layout follows the splatting community's attribute naming:
one ``vertex`` element per Gaussian with float32 properties

    x, y, z, opacity, f_dc_0..2, f_rest_*, scale_0..2, rot_0..3

plus a custom ``uchar is_object`` flag.  Values are stored plainly
(opacity in [0, 1], scales as positive lengths, SH coefficients raw) so a
save -> load round trip is bit-exact.  ``f_dc`` holds the zero-order SH
coefficient per channel; ``f_rest`` holds the remaining coefficients
channel-major (all R, then G, then B), 45 of them at the default degree 3.
Files missing ``is_object`` load with every Gaussian flagged background.
The scene background color rides along in a comment line.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError
from .scene import MAX_SH_DEGREE, GaussianScene, sh_coeff_count

_BACKGROUND_COMMENT = "splatcamo_background"

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1",
    "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2",
    "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4",
    "int": "<i4", "int32": "<i4",
}

_REST_COUNTS = {3 * (sh_coeff_count(d) - 1): d for d in range(MAX_SH_DEGREE + 1)}


def _header_lines(n: int, rest_count: int, background) -> list[str]:
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        "comment splatcamo gaussian scene",
        f"comment {_BACKGROUND_COMMENT} {background[0]!r} {background[1]!r} {background[2]!r}",
        f"element vertex {n}",
    ]
    props = ["x", "y", "z", "opacity", "f_dc_0", "f_dc_1", "f_dc_2"]
    props += [f"f_rest_{i}" for i in range(rest_count)]
    props += ["scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    lines += [f"property float {p}" for p in props]
    lines.append("property uchar is_object")
    lines.append("end_header")
    return lines


def save_scene(scene: GaussianScene, path) -> None:
    """Write the scene as binary little-endian PLY."""
    n = len(scene)
    k = sh_coeff_count(scene.sh_degree)
    rest_count = 3 * (k - 1)

    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("opacity", "<f4"),
              ("f_dc_0", "<f4"), ("f_dc_1", "<f4"), ("f_dc_2", "<f4")]
    fields += [(f"f_rest_{i}", "<f4") for i in range(rest_count)]
    fields += [(f"scale_{i}", "<f4") for i in range(3)]
    fields += [(f"rot_{i}", "<f4") for i in range(4)]
    fields += [("is_object", "u1")]
    rec = np.zeros(n, dtype=np.dtype(fields))

    rec["x"], rec["y"], rec["z"] = scene.means[:, 0], scene.means[:, 1], scene.means[:, 2]
    rec["opacity"] = scene.opacities
    for c in range(3):
        rec[f"f_dc_{c}"] = scene.sh[:, c, 0]
    for c in range(3):
        for j in range(k - 1):
            rec[f"f_rest_{c * (k - 1) + j}"] = scene.sh[:, c, j + 1]
    for i in range(3):
        rec[f"scale_{i}"] = scene.scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = scene.rotations[:, i]
    rec["is_object"] = scene.is_object.astype(np.uint8)

    bg = [float(v) for v in np.asarray(scene.background_color, dtype=np.float32)]
    header = "\n".join(_header_lines(n, rest_count, bg)) + "\n"
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def _parse_header(fh) -> tuple[int, list[tuple[str, str]], list[str], int]:
    """Returns (vertex_count, [(name, dtype)], comments, header_end_offset)."""
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise ParseError("not a PLY file (missing 'ply' magic)")
    fmt = fh.readline().strip()
    if fmt != b"format binary_little_endian 1.0":
        raise ParseError(f"unsupported PLY format line: {fmt.decode('ascii', 'replace')!r}")
    count = None
    props: list[tuple[str, str]] = []
    comments: list[str] = []
    in_vertex = False
    lineno = 2
    while True:
        line = fh.readline()
        lineno += 1
        if not line:
            raise ParseError("unexpected end of file inside PLY header")
        tokens = line.decode("ascii", "replace").strip().split()
        if not tokens:
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "comment":
            comments.append(" ".join(tokens[1:]))
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError(f"malformed element line {lineno}")
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tokens[2])
                except ValueError as e:
                    raise ParseError(f"bad vertex count on line {lineno}") from e
        elif tokens[0] == "property":
            if not in_vertex:
                continue
            if tokens[1] == "list":
                raise SchemaError("list properties are not supported for Gaussian scenes")
            if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                raise ParseError(f"malformed property line {lineno}: {' '.join(tokens)!r}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise ParseError(f"unrecognized header keyword {tokens[0]!r} on line {lineno}")
    if count is None:
        raise SchemaError("PLY file has no vertex element")
    return count, props, comments, fh.tell()


def load_scene(path) -> GaussianScene:
    """Read a scene written by :func:`save_scene` (or a compatible exporter)."""
    path = Path(path)
    data = path.read_bytes()
    fh = io.BytesIO(data)
    count, props, comments, offset = _parse_header(fh)

    names = [p[0] for p in props]
    dupes = {nm for nm in names if names.count(nm) > 1}
    if dupes:
        raise SchemaError(f"duplicate vertex properties: {sorted(dupes)}")
    dtype = np.dtype(props)
    expected = offset + count * dtype.itemsize
    if len(data) < expected:
        got = (len(data) - offset) // max(dtype.itemsize, 1)
        raise ParseError(f"truncated payload: expected {count} records, file holds {got}")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=offset)

    required = ["x", "y", "z", "opacity", "f_dc_0", "f_dc_1", "f_dc_2",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    missing = [nm for nm in required if nm not in names]
    if missing:
        raise SchemaError(f"missing required vertex properties: {missing}")

    rest_names = sorted((nm for nm in names if nm.startswith("f_rest_")),
                        key=lambda nm: int(nm.split("_")[-1]))
    rest_count = len(rest_names)
    if rest_count not in _REST_COUNTS:
        raise SchemaError(
            f"f_rest count {rest_count} does not match any SH degree "
            f"(expected one of {sorted(_REST_COUNTS)})"
        )
    if rest_names != [f"f_rest_{i}" for i in range(rest_count)]:
        raise SchemaError("f_rest indices are not contiguous from 0")
    degree = _REST_COUNTS[rest_count]
    k = sh_coeff_count(degree)

    n = count
    sh = np.zeros((n, 3, k), dtype=np.float32)
    for c in range(3):
        sh[:, c, 0] = rec[f"f_dc_{c}"]
    for c in range(3):
        for j in range(k - 1):
            sh[:, c, j + 1] = rec[f"f_rest_{c * (k - 1) + j}"]

    background = np.zeros(3, dtype=np.float32)
    for comment in comments:
        tokens = comment.split()
        if len(tokens) == 4 and tokens[0] == _BACKGROUND_COMMENT:
            try:
                background = np.array([float(t) for t in tokens[1:]], dtype=np.float32)
            except ValueError as e:
                raise ParseError(f"malformed background comment: {comment!r}") from e

    is_object = (np.asarray(rec["is_object"]) != 0) if "is_object" in names else np.zeros(n, dtype=bool)

    return GaussianScene(
        means=np.stack([rec["x"], rec["y"], rec["z"]], axis=1),
        scales=np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1),
        rotations=np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1),
        opacities=np.asarray(rec["opacity"]),
        sh=sh,
        is_object=is_object,
        background_color=background,
    )
