import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import ArtifactError, ConfigValidationError
from app.db.artifacts import ArtifactStore
from app.db.container import container_paths
from app.models.eig import EvaluatorKind
from app.models.forward import ModelKind
from app.models.run import RunConfig
from app.services.dipnet_service import Dataset, DipNet, dipnet_service
from app.services.eig_service import DlmcEstimator, OuterBank, eig_service
from app.services.forward_service import ObservableMap, forward_service
from app.services.prior_service import GaussianPrior, prior_service
from app.services.reduction_service import ReducedBases, reduction_service


logger = logging.getLogger(__name__)

PRIOR_ARTIFACT = "prior"
SAMPLES_ARTIFACT = "samples"
DATASET_ARTIFACT = "dataset"
BASES_ARTIFACT = "bases"
NET_ARTIFACT = "dipnet"


def parse_override(text: str) -> tuple:
    """'a.b=1' -> (['a', 'b'], 1); values parse as JSON and fall back to strings."""
    if "=" not in text:
        raise ConfigValidationError([f"override '{text}': expected KEY=VALUE"])
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigValidationError([f"override '{text}': empty key"])
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for text in overrides:
        path, value = parse_override(text)
        node = document
        for part in path[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[path[-1]] = value
    return document


def format_errors(error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "config"
        messages.append(f"{location}: {item['msg']}")
    return messages


def load_config(path: str, overrides: Sequence[str] = ()) -> RunConfig:
    """Read, override and validate a run configuration; every problem is reported at once."""
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigValidationError([f"config: file not found: {config_path}"])
    try:
        document = json.loads(config_path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigValidationError([f"config: invalid JSON: {e}"])
    if not isinstance(document, dict):
        raise ConfigValidationError(["config: top level must be an object"])
    document = apply_overrides(document, overrides)
    try:
        config = RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigValidationError(format_errors(e))

    missing = [
        f"verify.surrogates.{i}: file not found: {container_paths(p)[0]}"
        for i, p in enumerate(config.verify.surrogates)
        if not container_paths(p)[0].exists()
    ]
    if missing:
        raise ConfigValidationError(missing)
    return config


def get_threads(config: RunConfig) -> int:
    return config.threads or settings.threads


def get_store(config: RunConfig) -> ArtifactStore:
    return ArtifactStore(config.output_dir or settings.output_dir)


def get_prior(config: RunConfig) -> GaussianPrior:
    return prior_service.from_spec(config.prior, config.grid)


def get_model(config: RunConfig) -> ObservableMap:
    return forward_service.build_map(config.model, config.grid)


def get_sigma(config: RunConfig, d: int) -> np.ndarray:
    try:
        return config.noise.sigma_vector(d)
    except ValueError as e:
        raise ConfigValidationError([f"noise.sigma: {e}"])


def check_dimensions(config: RunConfig, prior: GaussianPrior, model: ObservableMap) -> None:
    if prior.n != model.n:
        raise ConfigValidationError([f"model: parameter dimension {model.n} does not match prior dimension {prior.n}"])


def design_indices(config: RunConfig, d: int) -> List[int]:
    return list(range(d)) if config.eig.design is None else list(config.eig.design)


def require_artifact(store: ArtifactStore, name: str, producer: str) -> Path:
    header, _ = container_paths(store.path(name))
    if not header.exists():
        raise ArtifactError(f"{header} not found; run '{producer}' first")
    return store.path(name)


def load_dataset(store: ArtifactStore) -> Dataset:
    return dipnet_service.load_dataset(require_artifact(store, DATASET_ARTIFACT, "gen-data"))


def load_bases(store: ArtifactStore) -> ReducedBases:
    return reduction_service.load_bases(require_artifact(store, BASES_ARTIFACT, "build-bases"))


def load_net(store: ArtifactStore, path: Optional[str] = None) -> DipNet:
    if path is not None:
        return dipnet_service.load(path)
    return dipnet_service.load(require_artifact(store, NET_ARTIFACT, "train"))


def has_dataset(store: ArtifactStore) -> bool:
    return container_paths(store.path(DATASET_ARTIFACT))[0].exists()


def surrogate_bank(config: RunConfig, store: ArtifactStore, prior: GaussianPrior, net: DipNet, sigma: np.ndarray) -> OuterBank:
    """Outer bank for surrogate estimates: stored data when large enough, else surrogate draws."""
    n_out = config.eig.n_out
    if has_dataset(store):
        dataset = load_dataset(store)
        if dataset.size >= n_out:
            return eig_service.outer_bank_from_dataset(dataset.inputs, dataset.outputs, sigma, config.seed, n_out)
        logger.warning("dataset holds %d samples, fewer than n_out=%d; sampling the surrogate", dataset.size, n_out)
    return eig_service.simulate_outer_samples(prior, net, sigma, n_out, config.seed)


def require_linear(config: RunConfig, command: str) -> np.ndarray:
    if config.model.kind != ModelKind.LINEAR:
        raise ConfigValidationError([f"model.kind: '{command}' requires a linear model, got '{config.model.kind.value}'"])
    return np.asarray(config.model.matrix, dtype=float)


def get_estimator(
    config: RunConfig,
    store: ArtifactStore,
    prior: GaussianPrior,
    model: ObservableMap,
    sigma: np.ndarray,
) -> DlmcEstimator:
    """DLMC estimator for the configured evaluator over a frozen outer bank."""
    threads = get_threads(config)
    if config.eig.evaluator == EvaluatorKind.SURROGATE:
        net = load_net(store)
        if net.n != model.n or net.d != model.d:
            raise ValueError(f"surrogate is {net.n}x{net.d}, model is {model.n}x{model.d}")
        bank = surrogate_bank(config, store, prior, net, sigma)
        evaluator = net
    else:
        bank = eig_service.simulate_outer_samples(prior, model, sigma, config.eig.n_out, config.seed, threads)
        evaluator = model
    return DlmcEstimator(
        evaluator, prior, sigma, bank, config.eig.n_in, config.seed,
        inner_mode=config.eig.inner_mode, evaluator_kind=config.eig.evaluator, threads=threads,
    )
