"""Run configuration: loading and validating the JSON config file.

The default configuration lives in `config.json` at the project root. Every
section is a pydantic model that rejects unknown keys, so a config is fully
validated before any computation starts.
"""

import json
import logging
import os
from typing import Any, Literal

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from src.core.equilibrium import SolverConfig
from src.core.model import (
    ArchitectureTemplate,
    NeuronKind,
    layer_output_shapes,
    network_input_shape,
    parse_architecture,
)
from src.core.numerics import Shape
from src.core.training import TrainConfig


class ConfigError(ValueError):
    """The run configuration is missing a value, malformed or inconsistent."""


# --- Sections ---


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "fashion-mnist"
    kind: Literal["idx", "cifar", "blobs", "xor"] = "idx"
    train_images: str = "fashion-mnist/train-images-idx3-ubyte.gz"
    train_labels: str = "fashion-mnist/train-labels-idx1-ubyte.gz"
    test_images: str = "fashion-mnist/t10k-images-idx3-ubyte.gz"
    test_labels: str = "fashion-mnist/t10k-labels-idx1-ubyte.gz"
    num_classes: int = Field(default=10, ge=2)
    subset: int | None = Field(default=None, ge=1)
    test_subset: int | None = Field(default=None, ge=1)
    synthetic_samples: int = Field(default=200, ge=4)
    augment: bool = False

    def known_image_shape(self) -> Shape | None:
        """(H, W, C) of the images when it is known without reading any file."""
        if self.kind == "cifar":
            return (32, 32, 3)
        if self.kind == "blobs":
            return (1, 1, max(2, self.num_classes))
        if self.kind == "xor":
            return (1, 1, 2)
        return None


class NeuronConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    kind: Literal["IF", "LIF"] = "IF"
    lam: float = Field(default=1.0, alias="lambda", gt=0, le=1)
    v_th: float = Field(default=2.0, gt=0)

    @model_validator(mode="after")
    def _check_leak(self) -> "NeuronConfig":
        if self.kind == "IF" and self.lam != 1.0:
            raise ValueError("IF neurons have lambda == 1; use kind 'LIF' for a leak.")
        return self

    def neuron_kind(self) -> NeuronKind:
        return NeuronKind(self.kind, self.lam)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    clip: float = Field(default=1.0, gt=0)
    batch_norm: bool = True
    init: Literal["uniform", "symmetric"] = "uniform"


class RunConfig(BaseModel):
    """The complete configuration of a run."""

    model_config = ConfigDict(extra="forbid")

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    architecture: str = "400 (F400)"
    neuron: NeuronConfig = Field(default_factory=NeuronConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    output_dir: str = "runs/default"
    seed: int = Field(default=0, ge=0, lt=2**64)

    @field_validator("architecture")
    @classmethod
    def _parse(cls, value: str) -> str:
        parse_architecture(value)
        return value

    @model_validator(mode="after")
    def _sync(self) -> "RunConfig":
        """Copy run-level seed, dataset, architecture and solver into `train`."""
        self.train.seed = self.seed
        self.train.dataset = self.dataset.name
        self.train.architecture = self.architecture
        self.train.backward_solver = self.solver
        return self

    @model_validator(mode="after")
    def _check_geometry(self) -> "RunConfig":
        image_shape = self.dataset.known_image_shape()
        if image_shape is not None:
            self.template(image_shape)
        return self

    def template(self, image_shape: Shape) -> ArchitectureTemplate:
        """Network template for images of shape (H, W, C).

        Raises:
            ConfigError: If the architecture does not fit the image shape.
        """
        layers, feedback = parse_architecture(self.architecture)
        template = ArchitectureTemplate(
            layers=layers,
            feedback=feedback,
            input_shape=network_input_shape(layers[0], image_shape),
            num_classes=self.dataset.num_classes,
            neuron=self.neuron.neuron_kind(),
            v_th=self.neuron.v_th,
            clip=self.model.clip,
            batch_norm=self.model.batch_norm,
            init=self.model.init,
        )
        try:
            layer_output_shapes(template)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return template


# --- Loading ---


def default_config_path() -> str:
    """Path of `config.json` in the project root."""
    project_root = os.path.dirname(os.path.dirname(os.path.dirname(__file__)))
    return os.path.join(project_root, "config.json")


def parse_run_config(data: dict[str, Any]) -> RunConfig:
    """Validate a configuration dictionary.

    Raises:
        ConfigError: If any field is unknown or invalid.
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        logging.error(f"Invalid configuration: {e}")
        raise ConfigError(str(e)) from e


def load_run_config(path: str | None = None) -> RunConfig:
    """Load and validate a JSON run configuration.

    Args:
        path (str, optional): Config file; the root `config.json` if omitted.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigError: If the file is not valid JSON or fails validation.
    """
    config_path = path or default_config_path()
    try:
        with open(config_path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        logging.error(f"Configuration file not found at {config_path}")
        raise
    except json.JSONDecodeError as e:
        logging.error(f"Error decoding '{config_path}': {e}")
        raise ConfigError(f"{config_path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path} must contain a JSON object.")
    return parse_run_config(data)
