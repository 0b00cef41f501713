import argparse

from app.cli.deps import (
    BASES_ARTIFACT,
    NET_ARTIFACT,
    check_dimensions,
    get_model,
    get_prior,
    get_store,
    get_threads,
    load_bases,
    load_dataset,
)
from app.cli.router import CommandRouter
from app.models.run import RunConfig
from app.services.dipnet_service import dipnet_service, l2_accuracy_from_outputs
from app.services.reduction_service import reduction_service
from app.services.verify_service import generalization_error_from_outputs


router = CommandRouter(tags=["surrogate"])


@router.command("build-bases", help="Estimate the active-subspace input basis and the POD output basis.")
def build_bases(config: RunConfig, args: argparse.Namespace) -> str:
    store = get_store(config)
    prior = get_prior(config)
    model = get_model(config)
    check_dimensions(config, prior, model)
    spec = config.reduction

    bases = reduction_service.build_bases(
        model,
        prior,
        config.seed,
        n_samples_as=spec.n_samples_as,
        n_samples_pod=spec.n_samples_pod,
        r_M=spec.input_rank,
        r_F=spec.output_rank,
        energy=spec.energy,
        threads=get_threads(config),
    )
    store.track(reduction_service.save_bases(bases, store.path(BASES_ARTIFACT)))
    store.update_manifest(
        "build-bases",
        config.seed,
        {"pde_solves": bases.pde_solves, "forward": model.solves.forward, "adjoint": model.solves.adjoint},
    )
    return (
        f"build-bases: r_M={bases.r_M}, r_F={bases.r_F} "
        f"(leading AS eigenvalue {bases.lambda_as[0]:.4g}, POD eigenvalue {bases.lambda_pod[0]:.4g}), "
        f"{bases.pde_solves} PDE solves"
    )


@router.command("train", help="Train the projected ResNet surrogate on the stored dataset and bases.")
def train(config: RunConfig, args: argparse.Namespace) -> str:
    store = get_store(config)
    dataset = load_dataset(store)
    bases = load_bases(store)
    if bases.n != dataset.n or bases.d != dataset.d:
        raise ValueError(f"bases ({bases.n}x{bases.d}) do not match the dataset ({dataset.n}x{dataset.d})")

    net = dipnet_service.build_net(config.network, bases, config.seed)
    report = dipnet_service.train(net, dataset, config.training, config.seed)

    payload = report.model_dump(mode="json")
    if dataset.test.size:
        predicted = net.evaluate_batch(dataset.inputs[dataset.test])
        reference = dataset.outputs[dataset.test]
        payload["epsilon_hat"] = generalization_error_from_outputs(predicted, reference)
        payload["l2_accuracy"] = l2_accuracy_from_outputs(predicted, reference)
        net.summary.update(epsilon_hat=payload["epsilon_hat"], l2_accuracy=payload["l2_accuracy"])

    store.track(dipnet_service.save(net, store.path(NET_ARTIFACT)))
    store.write_json("train_report.json", payload)
    store.update_manifest("train", config.seed, {"pde_solves": 0})
    accuracy = f", test accuracy {payload['l2_accuracy']:.2f}%" if "l2_accuracy" in payload else ""
    return (
        f"train: best validation loss {report.best_val_loss:.4e} at epoch {report.best_epoch} "
        f"of {report.epochs_run}, depth {report.final_depth}{accuracy}"
    )
