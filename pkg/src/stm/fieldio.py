"""Gaussian field serialization: splatting-style binary PLY and a JSON debug form."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import StmError
from .gaussians import GaussianField, sh_basis_count, sh_degree_from_count


def _property_names(n_basis: int) -> list[str]:
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (n_basis - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def field_to_table(field: GaussianField) -> np.ndarray:
    f = field.detach()
    n = len(f)
    sh = f.sh_coefficients.numpy()
    # f_rest is channel-major: all red coefficients, then green, then blue
    rest = sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    return np.concatenate(
        [
            f.positions.numpy(),
            sh[:, 0, :],
            rest,
            f.opacity_logits.numpy(),
            f.log_scales.numpy(),
            f.rotations.numpy(),
        ],
        axis=1,
    ).astype(np.float64)


def field_from_table(table: np.ndarray, n_basis: int) -> GaussianField:
    n = table.shape[0]
    k = 3 * (n_basis - 1)
    sh = np.empty((n, n_basis, 3))
    sh[:, 0, :] = table[:, 3:6]
    sh[:, 1:, :] = table[:, 6 : 6 + k].reshape(n, 3, n_basis - 1).transpose(0, 2, 1)
    o = 6 + k
    return GaussianField.from_arrays(
        positions=table[:, 0:3],
        sh_coefficients=sh,
        opacity_logits=table[:, o : o + 1],
        log_scales=table[:, o + 1 : o + 4],
        rotations=table[:, o + 4 : o + 8],
    )


def ply_bytes(field: GaussianField) -> bytes:
    names = _property_names(field.sh_coefficients.shape[1])
    table = field_to_table(field)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(field)}"]
    header += [f"property double {name}" for name in names]
    header += ["end_header"]
    return ("\n".join(header) + "\n").encode("ascii") + table.astype("<f8").tobytes()


def field_from_ply_bytes(data: bytes) -> GaussianField:
    marker = b"end_header\n"
    end = data.find(marker)
    if end < 0 or not data.startswith(b"ply"):
        raise StmError("not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise StmError("only binary_little_endian PLY is supported")
    n = 0
    props: list[tuple[str, str]] = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append((parts[1], parts[2]))
    types = {"double": "<f8", "float": "<f4"}
    dtype = np.dtype([(name, types[t]) for t, name in props])
    records = np.frombuffer(data[end + len(marker) :], dtype=dtype, count=n)
    n_rest = sum(1 for _, name in props if name.startswith("f_rest_"))
    n_basis = n_rest // 3 + 1
    sh_degree_from_count(n_basis)
    names = _property_names(n_basis)
    missing = [name for name in names if name not in dtype.names]
    if missing:
        raise StmError(f"PLY lacks properties: {missing}")
    table = np.stack([records[name].astype(np.float64) for name in names], axis=1) if n else np.zeros((0, len(names)))
    return field_from_table(table, n_basis)


def save_ply(field: GaussianField, path) -> None:
    Path(path).write_bytes(ply_bytes(field))


def load_ply(path) -> GaussianField:
    return field_from_ply_bytes(Path(path).read_bytes())


def field_to_json(field: GaussianField) -> str:
    f = field.detach()
    doc = {"sh_degree": f.sh_degree}
    for name, value in f.attributes().items():
        doc[name] = value.numpy().tolist()
    # json writes floats with repr(), which round-trips every finite double
    return json.dumps(doc)


def field_from_json(text: str) -> GaussianField:
    doc = json.loads(text)
    n_basis = sh_basis_count(int(doc["sh_degree"]))
    n = len(doc["positions"])

    def arr(name, shape):
        return torch.tensor(np.asarray(doc[name], dtype=np.float64).reshape(shape))

    return GaussianField(
        positions=arr("positions", (n, 3)),
        rotations=arr("rotations", (n, 4)),
        log_scales=arr("log_scales", (n, 3)),
        opacity_logits=arr("opacity_logits", (n, 1)),
        sh_coefficients=arr("sh_coefficients", (n, n_basis, 3)),
    )
