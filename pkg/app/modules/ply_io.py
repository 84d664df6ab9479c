from __future__ import annotations

import logging
import os
from typing import List
from typing import Union

import numpy as np
from plyfile import PlyData
from plyfile import PlyElement
from plyfile import PlyElementParseError
from plyfile import PlyHeaderParseError

from app.exception_handlers import PlyParseError
from app.modules.gaussians import SH_C0
from app.modules.gaussians import GaussianCloud

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def construct_list_of_attributes() -> List[str]:
    """Per-vertex property names, in file order."""
    attributes = ["x", "y", "z", "nx", "ny", "nz"]
    attributes += [f"f_dc_{i}" for i in range(3)]
    attributes.append("opacity")
    attributes += [f"scale_{i}" for i in range(3)]
    attributes += [f"rot_{i}" for i in range(4)]
    return attributes


def color_to_dc(color: np.ndarray) -> np.ndarray:
    return (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0


def dc_to_color(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5


def save_ply(cloud: GaussianCloud, path: PathLike) -> None:
    """Write a cloud as a binary little-endian PLY file.

    Every property is float32; normals are zero, colors are stored as the
    zeroth-order SH coefficient (c - 0.5) / C0, opacity as its logit, scales as
    their logs and rotations as (w, x, y, z) quaternions.

    Args:
        cloud (GaussianCloud): The cloud to save.
        path (PathLike): Destination file; parent directories are created.
    """
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)

    n = len(cloud)
    attributes = np.concatenate(
        (
            cloud.mu,
            np.zeros((n, 3)),
            color_to_dc(cloud.color),
            cloud.logit_opacity[:, None],
            cloud.log_scale,
            cloud.quat,
        ),
        axis=1,
    ).astype(np.float32)

    dtype_full = [(attribute, "<f4") for attribute in construct_list_of_attributes()]
    elements = np.empty(n, dtype=dtype_full)
    for column, attribute in enumerate(construct_list_of_attributes()):
        elements[attribute] = attributes[:, column]
    el = PlyElement.describe(elements, "vertex")
    PlyData([el], text=False, byte_order="<").write(os.fspath(path))
    logger.debug("Wrote %d Gaussians to %s", n, path)


def load_ply(path: PathLike) -> GaussianCloud:
    """Read a cloud written by ``save_ply``.

    Args:
        path (PathLike): PLY file to read.

    Returns:
        GaussianCloud: The cloud, with float64 arrays and ids 0..N-1.

    Raises:
        PlyParseError: Malformed header, wrong property set or truncated payload; the
            error names the offending element.
    """
    try:
        plydata = PlyData.read(os.fspath(path))
    except PlyHeaderParseError as e:
        raise PlyParseError("header", f"malformed PLY header in {path}: {e}")
    except PlyElementParseError as e:
        element = getattr(getattr(e, "element", None), "name", "vertex")
        raise PlyParseError(element, f"truncated or corrupt payload in {path}: {e}")
    except (ValueError, EOFError) as e:
        raise PlyParseError("payload", f"could not read {path}: {e}")

    names = [element.name for element in plydata.elements]
    if "vertex" not in names:
        raise PlyParseError("vertex", f"no vertex element in {path}")
    vertex = plydata["vertex"]

    expected = construct_list_of_attributes()
    found = [prop.name for prop in vertex.properties]
    if found != expected:
        missing = [p for p in expected if p not in found]
        extra = [p for p in found if p not in expected]
        detail = f"expected properties {expected}, found {found}"
        if missing:
            detail = f"missing properties {missing}"
        elif extra:
            detail = f"unexpected properties {extra}"
        raise PlyParseError("vertex", detail)
    for prop in vertex.properties:
        if np.dtype(prop.val_dtype).kind != "f" or np.dtype(prop.val_dtype).itemsize != 4:
            raise PlyParseError(prop.name, f"expected float32, found {prop.val_dtype}")

    data = vertex.data
    if len(data) != vertex.count:
        raise PlyParseError("vertex", f"truncated payload: {len(data)} of {vertex.count} rows")

    def column(name: str) -> np.ndarray:
        return np.asarray(data[name], dtype=np.float32).astype(np.float64)

    def stack(*columns: str) -> np.ndarray:
        return np.stack([column(c) for c in columns], axis=1).reshape(len(data), len(columns))

    return GaussianCloud(
        mu=stack("x", "y", "z"),
        quat=stack("rot_0", "rot_1", "rot_2", "rot_3"),
        log_scale=stack("scale_0", "scale_1", "scale_2"),
        logit_opacity=column("opacity"),
        color=dc_to_color(stack("f_dc_0", "f_dc_1", "f_dc_2")),
    )
