from __future__ import annotations

from .camera_schema import CameraRecord
from .camera_schema import SceneManifest
from .config_schema import GdsConfig
from .config_schema import GdsForm
from .config_schema import LearningRates
from .config_schema import LossWeights
from .config_schema import RasterSettings
from .config_schema import SceneBounds
from .config_schema import SynthConfig
from .config_schema import SynthPreset
from .config_schema import TrainConfig
from .metrics_schema import EvaluationReport
from .metrics_schema import GdsSummary
from .metrics_schema import MetricsRecord
from .metrics_schema import ViewEvaluation
