# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

import copy
from typing import Any, Optional, Sequence, TextIO

import yaml

from poisson_deq import blocks, dataset, equilibrium, training, util

SCALAR_SECTIONS = ("seed", "out", "jobs")

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "out": "out",
    "jobs": 1,
    "domain": {
        "n_control": 10,
        "min_angle": 20.0,
    },
    "dataset": {
        "path": None,  # <out>/dataset
        "train": 100,
        "val": 30,
        "test": 30,
        "node_band": [50, 150],
    },
    "model": {
        "latent_dim": 10,
        "hidden_dim": 10,
        "init": "glorot_uniform",
    },
    "train": {
        "lam": 0.1,
        "beta_reg": 1.0,
        "lr_autoencoder": 0.1,
        "lr_main": 0.01,
        "clip_norm": 1e-2,
        "epochs": 60,
        "batch_size": 10,
        "plateau_factor": 0.5,
        "plateau_patience": 10,
        "plateau_threshold": 1e-4,
        "hutchinson_samples": 1,
        "rho_iters": 100,
        "abort_fraction": 0.5,
        "abort_batches": 5,
    },
    "solve": {
        "method": "broyden",
        "rel_tol": 1e-5,
        "max_iter": 500,
        "anderson_memory": 5,
        "anderson_type": "type1",
    },
    "solve_backward": {
        "method": "broyden",
        "rel_tol": 1e-8,
        "max_iter": 500,
        "anderson_memory": 5,
        "anderson_type": "type1",
    },
    "eval": {
        "split": "test",
        "checkpoint": None,  # <out>/train/best.json
        "rho_iters": 100,
        "large_count": 10,
        "large_band": [200, 400],
        "holed_target_h": 0.03,
        "init_solver": "picard",
        "init_noise": 1.0,
        "graph_index": 0,
        "snapshot_every": 0,
    },
}


class ConfigError(Exception):
    pass


class UnknownKeyError(ConfigError):
    pass


class InvalidValueError(ConfigError):
    pass


def _coerce(where: str, default: Any, value: Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidValueError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidValueError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        # YAML 1.1 reads "1e-5" as a string
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise InvalidValueError(f"{where} must be a number, got {value!r}")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidValueError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            try:
                return list(util.parse_node_band(value))
            except ValueError as e:
                raise InvalidValueError(f"{where}: {e}")
        if not isinstance(value, list) or len(value) != len(default):
            raise InvalidValueError(f"{where} must be a list of {len(default)} items")
        return [_coerce(where, d, v) for d, v in zip(default, value)]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidValueError(f"{where} must be a string, got {value!r}")
        return value
    return value


class Config:
    def __init__(
        self,
        config_file_object: Optional[TextIO] = None,
        overrides: Sequence[tuple[str, str, Any]] = (),
        default_config: dict[str, Any] = DEFAULT_CONFIG,
    ) -> None:
        self._defaults = default_config
        self._config = copy.deepcopy(default_config)

        if config_file_object is not None:
            user_config = yaml.safe_load(config_file_object) or {}
            if not isinstance(user_config, dict):
                raise InvalidValueError("Config file must contain a mapping")

            for section, value in user_config.items():
                if section in SCALAR_SECTIONS:
                    self.set(section, "", value)
                elif isinstance(value, dict):
                    for key, item in value.items():
                        self.set(section, key, item)
                else:
                    self._check_section(section)
                    raise InvalidValueError(f"Section {section} must be a mapping")

        for section, key, value in overrides:
            self.set(section, key, value)

        # Validation: build every typed view once.
        self.dataset_config()
        self.model_config()
        self.train_config()

    def _check_section(self, section: str) -> None:
        if section not in self._defaults:
            raise UnknownKeyError(
                f"Unknown config section {section}; "
                f"valid sections: {', '.join(self._defaults)}"
            )

    def set(self, section: str, key: str, value: Any) -> None:
        self._check_section(section)

        if section in SCALAR_SECTIONS:
            if key:
                raise UnknownKeyError(f"{section} takes no keys, got {section}.{key}")
            self._config[section] = _coerce(section, self._defaults[section], value)
            return

        if key not in self._defaults[section]:
            raise UnknownKeyError(
                f"Unknown key {section}.{key}; valid keys: "
                f"{', '.join(self._defaults[section])}"
            )
        self._config[section][key] = _coerce(
            f"{section}.{key}", self._defaults[section][key], value
        )

    @property
    def config(self):
        return self._config

    @property
    def yaml(self):
        return yaml.safe_dump(self._config, indent=2, sort_keys=True)

    def get(self, section: str, key: str = "") -> Any:
        self._check_section(section)
        if section in SCALAR_SECTIONS:
            return self._config[section]
        try:
            return self._config[section][key]
        except KeyError:
            raise UnknownKeyError(f"Unknown key {section}.{key}")

    def dataset_config(self) -> dataset.DatasetConfig:
        ds = self._config["dataset"]
        domain = self._config["domain"]
        try:
            return dataset.DatasetConfig(
                seed=self._config["seed"],
                train=ds["train"],
                val=ds["val"],
                test=ds["test"],
                node_band=(ds["node_band"][0], ds["node_band"][1]),
                n_control=domain["n_control"],
                min_angle=domain["min_angle"],
            )
        except dataset.DatasetError as e:
            raise InvalidValueError(str(e))

    def model_config(self) -> blocks.ModelConfig:
        try:
            return blocks.ModelConfig(**self._config["model"])
        except blocks.BlocksError as e:
            raise InvalidValueError(str(e))

    def solve_config(self, backward: bool = False) -> equilibrium.SolveConfig:
        section = "solve_backward" if backward else "solve"
        try:
            return equilibrium.SolveConfig(**self._config[section])
        except equilibrium.EquilibriumError as e:
            raise InvalidValueError(f"{section}: {e}")

    def train_config(self) -> training.TrainConfig:
        try:
            return training.TrainConfig(
                seed=self._config["seed"],
                forward=self.solve_config(),
                backward=self.solve_config(backward=True),
                **self._config["train"],
            )
        except training.TrainingError as e:
            raise InvalidValueError(f"train: {e}")
