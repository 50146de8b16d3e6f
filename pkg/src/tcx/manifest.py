"""Experiment manifests: INI sections, strict keys, content hashing.

A manifest pins everything a run needs; its sha256 content hash is embedded
in every artifact so `report` can refuse to mix incompatible runs.
"""

import configparser
import hashlib
import os

from tcx import nn


class ManifestError(ValueError):
    pass


def _floats(text):
    return [float(t) for t in text.replace("|", ",").split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.replace("|", ",").split(",") if t.strip()]


def _widths(text):
    return [int(t) for t in text.replace("-", ",").split(",") if t.strip()]


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "out": (str, None),            # None -> TCX_OUT or ./tcx_out
        "jobs": (int, 1),
    },
    "model": {
        "layers": (str, ""),           # pipe-separated layer lines
        "stacked": (_widths, []),      # widths shorthand
        "residual": (_widths, []),
    },
    "data": {
        "kind": (str, "synthetic"),
        "n": (int, 256),
        "n_test": (int, 256),
        "dim": (int, 16),
        "classes": (int, 4),
        "separation": (float, 2.0),
        "seed_offset": (int, 0),
        "images": (str, ""),
        "labels": (str, ""),
        "test_images": (str, ""),
        "test_labels": (str, ""),
        "limit": (int, 0),             # optional cap on loaded IDX rows
    },
    "train": {
        "optimizer": (str, "adam"),
        "lr": (float, 1e-3),
        "momentum": (float, 0.0),
        "epochs": (int, 20),
        "batch_size": (int, 32),
        "task_loss": (str, "cross_entropy"),
        "track_every": (int, 5),
        "analysis_k": (int, 2000),
        "analysis_seed": (int, 0),
    },
    "estimate": {
        "kappa_fc": (float, 0.01),
        "kappa_conv": (float, 0.04),
        "estimator": (str, "kde"),
    },
    "ebm": {
        "lambda": (float, 0.0),
        "widths": (_ints, [32, 32]),
        "langevin_steps": (int, 20),
        "langevin_step_size": (float, 0.01),
        "ebm_lr": (float, 0.01),
        "steps_per_batch": (int, 1),
        "swish_beta": (float, 10.0),
        "last_k": (int, 4),
    },
    "sweep": {
        "lambdas": (_floats, [0.0, 0.01, 0.1, 1.0]),
        "seeds": (_ints, [0, 1, 2]),
        "l1": (_floats, []),
        "l2": (_floats, []),
    },
    "attack": {
        "step_size": (float, 0.5 / 255),
        "max_iters": (int, 500),
        "utility_target": (float, 40.0),
        "n_samples": (int, 20),
        "n_models": (int, 2),
    },
    "distill": {
        "task_ns": (_ints, [0, 1, 2, 4, 8]),
        "task_width": (int, 32),
        "trials": (int, 1),
        "hw": (int, 16),
        "n": (int, 192),
        "target_depths": (_ints, [2, 4]),
        "target_width": (int, 32),
        "epochs": (int, 20),
    },
}

VALID_ESTIMATORS = ("kde", "exact", "both")


class Manifest:
    def __init__(self, sections, source_text=""):
        self.sections = sections
        self.hash = hashlib.sha256(
            "\n".join(f"{s}.{k}={sections[s][k]!r}"
                      for s in sorted(sections)
                      for k in sorted(sections[s])).encode()).hexdigest()[:16]
        self.source_text = source_text

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def seed(self):
        return self.sections["run"]["seed"]

    @property
    def out_dir(self):
        out = self.sections["run"]["out"]
        if out:
            return out
        return os.environ.get("TCX_OUT", "tcx_out")

    def model_spec(self):
        model = self.sections["model"]
        chosen = [k for k in ("layers", "stacked", "residual") if model[k]]
        if len(chosen) != 1:
            raise ManifestError(
                "exactly one of model.layers / model.stacked / model.residual "
                f"must be set, got {chosen or 'none'}")
        if model["layers"]:
            spec = nn.parse_spec_text(model["layers"].split("|"))
        elif model["stacked"]:
            spec = nn.stacked_mlp_spec(model["stacked"])
        else:
            spec = nn.residual_mlp_spec(model["residual"])
        nn.validate_spec(spec)
        return spec


def _parse_sections(cp):
    sections = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ManifestError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ManifestError(f"unknown key {key!r} in [{section}]")
    for section, keys in SCHEMA.items():
        sections[section] = {}
        for key, (parse, default) in keys.items():
            if cp.has_option(section, key):
                raw = cp.get(section, key)
                try:
                    sections[section][key] = parse(raw)
                except (TypeError, ValueError) as exc:
                    raise ManifestError(
                        f"bad value for {section}.{key}: {raw!r}") from exc
            else:
                sections[section][key] = default
    if sections["estimate"]["estimator"] not in VALID_ESTIMATORS:
        raise ManifestError(
            f"estimate.estimator must be one of {VALID_ESTIMATORS}")
    return sections


def load_manifest(path, overrides=None):
    """Parse and validate; overrides is a {(section, key): raw_string} map."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            text = fh.read()
        cp.read_string(text)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc}") from exc
    except configparser.Error as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc
    sections = _parse_sections(cp)
    for (section, key), raw in (overrides or {}).items():
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ManifestError(f"unknown override {section}.{key}")
        parse, _ = SCHEMA[section][key]
        sections[section][key] = parse(raw)
    return Manifest(sections, source_text=text)
