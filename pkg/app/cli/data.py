import argparse

import numpy as np

from app.cli.deps import (
    DATASET_ARTIFACT,
    PRIOR_ARTIFACT,
    SAMPLES_ARTIFACT,
    check_dimensions,
    get_model,
    get_prior,
    get_store,
    get_threads,
)
from app.cli.router import CommandRouter
from app.core.random import PRIOR_STREAM, derive_rng
from app.models.run import RunConfig
from app.services.dipnet_service import dipnet_service
from app.services.prior_service import prior_service


router = CommandRouter(tags=["data"])


@router.command(
    "sample-prior",
    help="Build the prior and write seeded prior draws.",
    arguments=[(("--count",), {"type": int, "default": 10, "help": "number of draws"})],
)
def sample_prior(config: RunConfig, args: argparse.Namespace) -> str:
    if args.count < 1:
        raise ValueError(f"--count must be at least 1, got {args.count}")
    store = get_store(config)
    prior = get_prior(config)
    samples = np.array([prior_service.prior_sample(prior, derive_rng(config.seed, PRIOR_STREAM, i)) for i in range(args.count)])

    store.track(prior_service.save_prior(prior, store.path(PRIOR_ARTIFACT)))
    store.write_container(SAMPLES_ARTIFACT, {"count": args.count, "n": prior.n, "seed": config.seed}, [("samples", samples)])
    store.update_manifest("sample-prior", config.seed)
    return f"sample-prior: {args.count} draws of dimension {prior.n} written to {store.path(SAMPLES_ARTIFACT)}.json"


@router.command("gen-data", help="Evaluate the forward model on prior draws and store the dataset.")
def gen_data(config: RunConfig, args: argparse.Namespace) -> str:
    store = get_store(config)
    prior = get_prior(config)
    model = get_model(config)
    check_dimensions(config, prior, model)

    dataset = dipnet_service.generate_dataset(
        model,
        prior,
        config.data.n_samples,
        config.seed,
        test_fraction=config.data.test_fraction,
        validation_fraction=config.training.split,
        threads=get_threads(config),
    )
    paths = dipnet_service.save_dataset(dataset, store.path(DATASET_ARTIFACT))
    store.track(paths)
    store.update_manifest("gen-data", config.seed, {"pde_solves": dataset.pde_solves})
    return (
        f"gen-data: {dataset.size} samples (n={dataset.n}, d={dataset.d}; "
        f"{dataset.train.size}/{dataset.validation.size}/{dataset.test.size} train/validation/test), "
        f"{dataset.pde_solves} PDE solves"
    )
