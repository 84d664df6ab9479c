from __future__ import annotations

from typing import List

from pydantic import BaseModel
from pydantic import Field

from .config_schema import SceneBounds


class CameraRecord(BaseModel):
    """One entry of a cameras JSON file.

    Attributes:
        id (int): Camera id, unique within the file.
        width, height (int): Image size in pixels.
        fx, fy, cx, cy (float): Pinhole intrinsics in pixels.
        rot (List[float]): World-to-camera rotation, 9 values row-major.
        trans (List[float]): World-to-camera translation.
        near, far (float): Depth clip planes in world units.
    """

    id: int = Field(..., title="Camera id")
    width: int = Field(..., gt=0, title="Width")
    height: int = Field(..., gt=0, title="Height")
    fx: float = Field(..., title="Focal length x")
    fy: float = Field(..., title="Focal length y")
    cx: float = Field(..., title="Principal point x")
    cy: float = Field(..., title="Principal point y")
    rot: List[float] = Field(..., min_length=9, max_length=9, title="Rotation")
    trans: List[float] = Field(..., min_length=3, max_length=3, title="Translation")
    near: float = Field(0.01, gt=0.0, title="Near plane")
    far: float = Field(100.0, gt=0.0, title="Far plane")

    class Config:
        """Pydantic model configuration.

        JSON Schema Extra:
        - Includes examples of the record structure.
        """

        json_schema_extra = {
            "examples": [
                {
                    "id": 0,
                    "width": 64,
                    "height": 64,
                    "fx": 77.25,
                    "fy": 77.25,
                    "cx": 32.0,
                    "cy": 32.0,
                    "rot": [1, 0, 0, 0, 1, 0, 0, 0, 1],
                    "trans": [0, 0, 2.5],
                },
            ],
        }


class SceneManifest(BaseModel):
    """A posed image set ready for fitting.

    Attributes:
        cameras (List[CameraRecord]): Camera records, in file order.
        images (List[str]): One image path per camera.
        bounds (SceneBounds): Box used to initialize the cloud.
    """

    cameras: List[CameraRecord]
    images: List[str]
    bounds: SceneBounds = Field(default_factory=SceneBounds)
