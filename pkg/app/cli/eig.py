import argparse

import numpy as np

from app.cli.deps import (
    check_dimensions,
    design_indices,
    get_estimator,
    get_model,
    get_prior,
    get_sigma,
    get_store,
    require_linear,
)
from app.cli.router import CommandRouter
from app.models.eig import EigEstimate, EvaluatorKind
from app.models.run import RunConfig
from app.services.eig_service import eig_service


router = CommandRouter(tags=["eig"])


@router.command("estimate-eig", help="Estimate the expected information gain of the configured design.")
def estimate_eig(config: RunConfig, args: argparse.Namespace) -> str:
    store = get_store(config)
    prior = get_prior(config)
    model = get_model(config)
    check_dimensions(config, prior, model)
    sigma = get_sigma(config, model.d)
    design = design_indices(config, model.d)

    if config.eig.evaluator == EvaluatorKind.CLOSED_FORM:
        G = require_linear(config, "estimate-eig")
        value = eig_service.eig_closed_form_linear_gaussian(G, prior.covariance(), sigma, design)
        estimate = EigEstimate(
            value=value, stderr=0.0, n_out=0, n_in=0, design_indices=sorted(design),
            seed=config.seed, evaluator_kind=EvaluatorKind.CLOSED_FORM,
        )
    else:
        estimator = get_estimator(config, store, prior, model, sigma)
        estimate = estimator.estimate(design)
        estimate.pde_solves += estimator.bank.pde_solves
        terms = np.asarray(estimate.per_outer_terms)
        running = np.cumsum(terms) / np.arange(1, terms.size + 1)
        store.write_csv(
            "eig_terms.csv",
            ["outer", "term", "running_mean"],
            ([i, float(t), float(mean)] for i, (t, mean) in enumerate(zip(terms, running))),
        )

    store.write_json("eig.json", estimate)
    store.update_manifest("estimate-eig", config.seed, {"pde_solves": estimate.pde_solves})
    return (
        f"estimate-eig: EIG = {estimate.value:.6f} ± {estimate.stderr:.2e} "
        f"(design {estimate.design_indices}, evaluator {estimate.evaluator_kind.value}, "
        f"n_out={estimate.n_out}, n_in={estimate.n_in}, {estimate.pde_solves} PDE solves)"
    )
