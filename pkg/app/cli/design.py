import argparse

from app.cli.deps import (
    check_dimensions,
    design_indices,
    get_estimator,
    get_model,
    get_prior,
    get_sigma,
    get_store,
    get_threads,
    require_linear,
)
from app.cli.router import CommandRouter
from app.core.exceptions import ConfigValidationError
from app.core.random import DESIGN_STREAM, derive_rng
from app.models.eig import EvaluatorKind
from app.models.run import RunConfig
from app.services.design_service import design_service
from app.services.eig_service import eig_service


router = CommandRouter(tags=["design"])


@router.command("greedy", help="Select sensors greedily with the configured EIG evaluator.")
def greedy(config: RunConfig, args: argparse.Namespace) -> str:
    if config.greedy is None:
        raise ConfigValidationError(["greedy: section required for the 'greedy' command"])
    store = get_store(config)
    prior = get_prior(config)
    model = get_model(config)
    check_dimensions(config, prior, model)
    sigma = get_sigma(config, model.d)
    threads = get_threads(config)

    pde_solves = 0
    if config.eig.evaluator == EvaluatorKind.CLOSED_FORM:
        G = require_linear(config, "greedy")
        eig_eval = design_service.closed_form_evaluator(G, prior.covariance(), sigma)
    else:
        estimator = get_estimator(config, store, prior, model, sigma)
        pde_solves += estimator.bank.pde_solves
        eig_eval = design_service.dlmc_evaluator(estimator)

    before = model.solves.total
    result = design_service.greedy_select(
        eig_eval, model.d, config.greedy.r, threads=threads,
        kind=config.eig.evaluator.value, seed=config.seed,
    )
    if config.greedy.n_random:
        rng = derive_rng(config.seed, DESIGN_STREAM)
        result.random_design_eigs = design_service.random_baseline(eig_eval, rng, model.d, config.greedy.r, config.greedy.n_random)
    pde_solves += model.solves.total - before

    store.write_json("greedy.json", result)
    store.update_manifest("greedy", config.seed, {"pde_solves": pde_solves})
    baseline = ""
    if result.random_design_eigs:
        baseline = f"; best of {len(result.random_design_eigs)} random designs {max(result.random_design_eigs):.6f}"
    return f"greedy: indices {result.indices}, EIG trace {[round(v, 6) for v in result.per_step_eig]}{baseline}"


@router.command("oracle", help="Closed-form linear-Gaussian EIG and the exhaustive optimal design.")
def oracle(config: RunConfig, args: argparse.Namespace) -> str:
    store = get_store(config)
    prior = get_prior(config)
    G = require_linear(config, "oracle")
    model = get_model(config)
    check_dimensions(config, prior, model)
    sigma = get_sigma(config, model.d)
    covariance = prior.covariance()

    design = design_indices(config, model.d)
    payload = {
        "design_indices": sorted(design),
        "eig": eig_service.eig_closed_form_linear_gaussian(G, covariance, sigma, design),
    }
    summary = f"oracle: closed-form EIG {payload['eig']:.6f} for design {payload['design_indices']}"
    if config.greedy is not None:
        eig_eval = design_service.closed_form_evaluator(G, covariance, sigma)
        best, value = design_service.exhaustive_select(eig_eval, model.d, config.greedy.r, threads=get_threads(config))
        chosen = design_service.greedy_select(eig_eval, model.d, config.greedy.r, kind="closed_form", seed=config.seed)
        payload["exhaustive"] = {"indices": best.indices, "eig": value}
        payload["greedy"] = chosen
        summary += f"; exhaustive r={config.greedy.r}: {best.indices} ({value:.6f}), greedy {chosen.indices}"

    store.write_json("oracle.json", payload)
    store.update_manifest("oracle", config.seed)
    return summary
