"""Torch-to-qbound conversion: checkpoints and small evaluation datasets."""

from .export import (
    ExportConfig,
    ExportError,
    convert_module,
    export_dataset,
    export_model,
    load_checkpoint,
)
from .formats import write_dataset, write_model

__version__ = "0.1.0"
