"""Explanation-enhanced knowledge distillation.

Thin layer over the compiled core: configs are plain dicts, arrays are numpy.
"""

import json as _json

from . import _e2kd
from ._e2kd import (  # noqa: F401
    ConfigError,
    DataError,
    Dataset,
    DatasetSplit,
    Error,
    FrozenStore,
    GeometryError,
    InputError,
    IntegrityError,
    Model,
    StateError,
    StorageError,
    TrainingError,
    UnsupportedError,
    agreement,
    epg,
    estimate_period,
    exp_loss,
    iou,
    kd_loss,
    load_dataset,
    map_cosine,
    mld_loss,
    save_dataset,
    shift_diagonal,
    subsample_fraction,
    subsample_shots,
)

__version__ = _e2kd.__version__


def _dump(cfg):
    return "" if cfg is None else _json.dumps(cfg)


def generate_biased(**params):
    return _e2kd.generate_biased(_dump(params))


def generate_shapes(**params):
    return _e2kd.generate_shapes(_dump(params))


def make_model(family, depth_preset="student", num_classes=2, seed=0, **overrides):
    spec = dict(family=family, depth_preset=depth_preset, num_classes=num_classes, seed=seed, **overrides)
    return Model(_dump(spec))


def model_spec(model):
    return _json.loads(model.spec_json())


def freeze(teacher, dataset, method="", batch_size=32):
    return _e2kd.freeze(teacher, dataset, method, batch_size)


def train_teacher(model, split, config=None):
    """Returns (trained model, history dict)."""
    trained, history = _e2kd.train_teacher(model, split, _dump(config))
    return trained, _json.loads(history)


def default_distill_config(student_family):
    return _json.loads(_e2kd.default_distill_config(student_family))


def distill(teacher, student, split, config, store=None):
    """Returns (selected student, history dict). `config` is merged over the
    student family's defaults."""
    cfg = default_distill_config(model_spec(student)["family"])
    for key, value in config.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    trained, history = _e2kd.distill(teacher, student, split, _dump(cfg), store)
    return trained, _json.loads(history)


def evaluate(student, teacher, split, config=None):
    return _json.loads(_e2kd.evaluate(student, teacher, split, _dump(config)))


def run_cli(*args):
    """Runs a CLI command in-process; returns (exit_code, stdout, stderr)."""
    return _e2kd.run_cli([str(a) for a in args])
