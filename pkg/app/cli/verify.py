import argparse
from typing import List, Optional, Tuple

import numpy as np

from app.cli.deps import (
    check_dimensions,
    get_model,
    get_prior,
    get_sigma,
    get_store,
    get_threads,
    has_dataset,
    load_bases,
    load_dataset,
    load_net,
)
from app.cli.router import CommandRouter
from app.core.exceptions import ConfigValidationError
from app.core.random import DESIGN_STREAM, VERIFY_STREAM, derive_rng
from app.models.run import RunConfig
from app.services.design_service import design_service
from app.services.dipnet_service import l2_accuracy_from_outputs
from app.services.eig_service import eig_service
from app.services.forward_service import ShiftedMap
from app.services.verify_service import CSV_HEADER, verify_service


router = CommandRouter(tags=["verify"])


def random_designs(config: RunConfig, d: int) -> List[List[int]]:
    size = config.verify.design_size
    if size > d:
        raise ConfigValidationError([f"verify.design_size: {size} exceeds the {d} candidates"])
    rng = derive_rng(config.seed, DESIGN_STREAM, 1)
    return [design_service.random_design(rng, d, size).indices for _ in range(config.verify.n_designs)]


def test_samples(config: RunConfig, store, prior) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Held-out dataset samples when available, else fresh prior draws."""
    if has_dataset(store):
        dataset = load_dataset(store)
        if dataset.test.size:
            return dataset.inputs[dataset.test], dataset.outputs[dataset.test]
    count = max(config.data.n_samples // 5, 2)
    inputs = np.array([prior.sample(derive_rng(config.seed, VERIFY_STREAM, i)) for i in range(count)])
    return inputs, None


@router.command("verify", help="Sweep EIG error against surrogate generalization error on shared sample banks.")
def verify(config: RunConfig, args: argparse.Namespace) -> str:
    store = get_store(config)
    prior = get_prior(config)
    model = get_model(config)
    check_dimensions(config, prior, model)
    sigma = get_sigma(config, model.d)
    threads = get_threads(config)
    spec = config.verify

    direction = np.ones(model.d) / np.sqrt(model.d)
    surrogates, breadths = [], []
    for epsilon in spec.epsilons:
        surrogates.append((f"shift-{epsilon!r}", ShiftedMap(model, epsilon * direction)))
        breadths.append(None)
    for path in spec.surrogates:
        net = load_net(store, path)
        surrogates.append((path, net))
        breadths.append(net.r)

    inputs, outputs = test_samples(config, store, prior)
    if outputs is None:
        outputs = model.evaluate_batch(inputs, threads)
    accuracies = [l2_accuracy_from_outputs(s.evaluate_batch(inputs), outputs) for _, s in surrogates]

    bank = eig_service.simulate_outer_samples(prior, model, sigma, config.eig.n_out, config.seed, threads)
    report = verify_service.bound_sweep(
        surrogates, model, prior, sigma, random_designs(config, model.d), bank,
        n_in=config.eig.n_in, seed=config.seed, test_inputs=inputs, test_outputs=outputs,
        inner_mode=config.eig.inner_mode, n_in_grid=spec.n_in_grid,
        breadths=breadths, accuracies=accuracies, threads=threads,
    )
    store.write_json("verify.json", report)
    store.write_csv("verify.csv", CSV_HEADER, verify_service.csv_rows(report))
    store.update_manifest("verify", config.seed, {"pde_solves": model.solves.total})
    return (
        f"verify: {len(report.records)} surrogates, EIG-error slope {report.slope:.3f}, "
        f"log-normalization slope {report.log_norm_slope:.3f}, C_hat {report.c_hat:.3e}, C_i_hat {report.c_i_hat:.3e}"
    )


@router.command("compare-mc", help="Compare surrogate Monte Carlo with cost-matched true-map Monte Carlo.")
def compare_mc(config: RunConfig, args: argparse.Namespace) -> str:
    store = get_store(config)
    prior = get_prior(config)
    model = get_model(config)
    check_dimensions(config, prior, model)
    sigma = get_sigma(config, model.d)
    threads = get_threads(config)
    spec = config.verify

    net = load_net(store, spec.surrogates[0] if spec.surrogates else None)
    n_out = config.eig.n_out
    n_in_budget = spec.n_in_budget
    if n_in_budget is None:
        cost = load_dataset(store).pde_solves + load_bases(store).pde_solves
        n_in_budget = max(1, cost // n_out)

    bank = eig_service.simulate_outer_samples(prior, model, sigma, n_out, config.seed, threads)
    result = verify_service.budget_comparison(
        net, model, prior, sigma, random_designs(config, model.d), bank, config.seed,
        n_in_ref=spec.n_in_ref, n_in_surrogate=spec.n_in_ref, n_in_budget=n_in_budget, threads=threads,
    )
    store.write_json("compare_mc.json", result)
    store.update_manifest("compare-mc", config.seed, {"pde_solves": model.solves.total})
    return (
        f"compare-mc: mean |log-normalization error| surrogate {result.mean_surrogate_error:.4e} "
        f"vs budget-matched ({n_in_budget} inner samples) {result.mean_budget_error:.4e}"
    )
