"""Command-line client of the training service.

Every subcommand builds a request model, posts it to the service, and
renders the response. Without ``--server`` the service app runs in-process
over an ASGI transport, so the CLI works standalone; with ``--server URL``
the same requests go to a remote instance (file paths in requests are then
interpreted on the server).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx
import numpy as np

from .config import DEFAULTS, RunConfig, load_config


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app(), base_url="http://icsreid.local")


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    response = client.post(path, json=payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        click.echo(f"error: {detail}", err=True)
        sys.exit(1)
    return response.json()


def _config_overrides(config_path: str | None, sets: tuple[str, ...]) -> dict:
    overrides: dict = {}
    if config_path:
        overrides.update(load_config(config_path).as_dict())
        # send only the non-default entries over the wire
        overrides = {k: v for k, v in overrides.items() if v != DEFAULTS[k]}
    for item in sets:
        if "=" not in item:
            raise click.BadParameter(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    RunConfig(overrides)  # validate keys and coercions before sending
    return overrides


@click.group()
@click.option("--server", default=None, help="Base URL of a running service; default in-process.")
@click.pass_context
def main(ctx: click.Context, server: str | None):
    """Intra-camera supervised re-id toolkit."""
    ctx.obj = server


@main.command()
@click.option("--identities", type=int, required=True, help="Number of true identities.")
@click.option("--cameras", type=int, required=True, help="Number of cameras.")
@click.option("--min-cameras", type=int, default=2, show_default=True)
@click.option("--max-cameras", type=int, default=None, help="Default: all cameras.")
@click.option("--dim", type=int, default=32, show_default=True)
@click.option("--shift", type=float, default=0.0, show_default=True)
@click.option("--noise", type=float, default=0.0, show_default=True)
@click.option("--min-images", type=int, default=2, show_default=True)
@click.option("--max-images", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.pass_obj
def simulate(server, identities, cameras, min_cameras, max_cameras, dim, shift, noise,
             min_images, max_images, seed, out_dir):
    """Generate a synthetic world: manifest, latents, and truth table."""
    payload = {
        "spec": {
            "true_identity_count": identities,
            "camera_count": cameras,
            "cameras_per_identity": [min_cameras, max_cameras or cameras],
            "feature_dim": dim,
            "camera_shift_magnitude": shift,
            "noise_sigma": noise,
            "seed": seed,
            "images_per_appearance": [min_images, max_images],
        },
        "include_latents": True,
    }
    with _client(server) as client:
        data = _post(client, "/simulate", payload)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.csv"
    with open(manifest_path, "w", encoding="utf-8") as handle:
        for row in data["rows"]:
            handle.write(f"{row['image_ref']},{row['camera_id']},{row['intra_label']}\n")
    latents = {ref: np.array(vec, dtype=np.float32) for ref, vec in data["latents"].items()}
    np.savez(out / "latents.npz", **latents)
    (out / "truth.json").write_text(
        json.dumps({"entries": data["truth"]}, indent=2) + "\n", encoding="utf-8"
    )
    click.echo(
        f"wrote {len(data['rows'])} samples, {data['accumulated_ids']} accumulated ids "
        f"across {data['camera_count']} cameras to {out}"
    )


@main.command("prompt-train")
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--latents", type=click.Path(), required=True)
@click.option("--out", "output", type=click.Path(), required=True, help="Prompt bank file.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "sets", multiple=True, help="Override a config key: key=value.")
@click.pass_obj
def prompt_train(server, manifest, latents, output, config_path, sets):
    """Learn per-identity prompt tokens (stage 1)."""
    payload = {
        "manifest_path": str(Path(manifest).resolve()),
        "latents_path": str(Path(latents).resolve()),
        "output_path": str(Path(output).resolve()),
        "config": _config_overrides(config_path, sets),
    }
    with _client(server) as client:
        data = _post(client, "/prompt-train", payload)
    click.echo(
        f"trained prompts for {data['identity_count']} ids over {data['epochs']} epochs; "
        f"final loss {data['loss_history'][-1]:.4f}" if data["loss_history"] else
        f"initialized prompts for {data['identity_count']} ids (0 epochs)"
    )
    click.echo(f"bank saved to {data['output_path']}")


@main.command()
@click.option("--centroids", type=click.Path(), required=True,
              help="NPZ file with arrays: centroids, camera_ids, intra_labels.")
@click.option("--threshold", type=float, required=True)
@click.option("--metric", type=click.Choice(["euclidean", "cosine"]), default="euclidean",
              show_default=True)
@click.option("--out", "output", type=click.Path(), default=None, help="Pseudo-label JSON file.")
@click.pass_obj
def associate(server, centroids, threshold, metric, output):
    """Run constrained cross-camera association on a centroid file."""
    with np.load(centroids) as archive:
        matrix = archive["centroids"]
        camera_ids = archive["camera_ids"]
        intra_labels = archive["intra_labels"]
    entries = [
        {
            "camera_id": int(camera_ids[i]),
            "intra_label": int(intra_labels[i]),
            "centroid": matrix[i].astype(float).tolist(),
        }
        for i in range(len(camera_ids))
    ]
    payload = {"entries": entries, "threshold": threshold, "metric": metric}
    with _client(server) as client:
        data = _post(client, "/associate", payload)
    diag = data["diagnostics"]
    click.echo(
        f"{diag['edge_count']} edges, {diag['cluster_count']} clusters, "
        f"{diag['camera_violation_count']} camera-violating components"
    )
    click.echo(f"component sizes: {diag['component_size_histogram']}")
    if output:
        Path(output).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
        click.echo(f"pseudo labels written to {output}")


@main.command()
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--latents", type=click.Path(), required=True)
@click.option("--prompt-bank", type=click.Path(), required=True)
@click.option("--checkpoint-out", type=click.Path(), required=True)
@click.option("--truth", type=click.Path(), default=None, help="Truth table for diagnostics only.")
@click.option("--log-out", type=click.Path(), default=None, help="Line-delimited epoch log.")
@click.option("--report-dir", type=click.Path(), default=None)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--set", "sets", multiple=True, help="Override a config key: key=value.")
@click.pass_obj
def train(server, manifest, latents, prompt_bank, checkpoint_out, truth, log_out, report_dir,
          config_path, sets):
    """Run staged training (stages 2-3) and write a checkpoint."""
    payload = {
        "manifest_path": str(Path(manifest).resolve()),
        "latents_path": str(Path(latents).resolve()),
        "prompt_bank_path": str(Path(prompt_bank).resolve()),
        "checkpoint_path": str(Path(checkpoint_out).resolve()),
        "truth_path": str(Path(truth).resolve()) if truth else None,
        "log_path": str(Path(log_out).resolve()) if log_out else None,
        "report_dir": str(Path(report_dir).resolve()) if report_dir else None,
        "config": _config_overrides(config_path, sets),
    }
    with _client(server) as client:
        data = _post(client, "/train", payload)
    click.echo(f"trained {data['epochs_run']} epochs; checkpoint at {data['checkpoint_path']}")
    if data["cluster_count"] is not None:
        click.echo(f"final cluster count: {data['cluster_count']}")
    for key, value in sorted(data["final_metrics"].items()):
        click.echo(f"{key}={value:.6g}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--latents", type=click.Path(), required=True)
@click.option("--truth", type=click.Path(), default=None)
@click.option("--out-dir", type=click.Path(), default=None)
@click.option("--set", "sets", multiple=True, help="Override a config key: key=value.")
@click.pass_obj
def evaluate(server, checkpoint, manifest, latents, truth, out_dir, sets):
    """Score retrieval quality of a checkpoint on a manifest."""
    payload = {
        "checkpoint_path": str(Path(checkpoint).resolve()),
        "manifest_path": str(Path(manifest).resolve()),
        "latents_path": str(Path(latents).resolve()),
        "truth_path": str(Path(truth).resolve()) if truth else None,
        "output_dir": str(Path(out_dir).resolve()) if out_dir else None,
        "config": _config_overrides(None, sets),
    }
    with _client(server) as client:
        data = _post(client, "/evaluate", payload)
    for key, value in sorted(data["metrics"].items()):
        click.echo(f"{key}={value:.6g}")
    for path in data["files"]:
        click.echo(f"wrote {path}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host: str, port: int):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("icsreid.service.app:app", host=host, port=port)


@main.command("write-config")
@click.option("--out", "output", type=click.Path(), required=True)
def write_config(output):
    """Write the full default configuration to a file."""
    from .config import save_config

    save_config(RunConfig(), output)
    click.echo(f"defaults written to {output}")


if __name__ == "__main__":
    main()
