#!/usr/bin/env python3
"""
Pipeline Service

Orchestrates every experiment: dataset generation, training (single runs and
KL-weight sweeps), sampling, reconstruction, interpolation, evaluation,
schedule dumps and PCA grids. Each command returns a result dictionary and
writes its artifacts through the output service.
"""

import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .lrdm_analysis import (default_t_grid, decode_representations, distortion_curve, energy_distance,
                            energy_null, interpolate_pair, kl_curve, lambda_sweep_summary, pca_grid,
                            reconstruct, reconstruction_metrics, spearman_rho)
from .lrdm_autodiff import no_grad
from .lrdm_data import (Dataset, DatasetFormatError, load_checkpoint, load_csv_dataset, make_mixture,
                        restore_rng, save_checkpoint, save_csv_dataset)
from .lrdm_objectives import kl_standard_normal_values
from .lrdm_output import OutputService
from .lrdm_samplers import SampleTrace, SamplerConfig, SamplerService, uniform_steps
from .lrdm_schedule import SCHEDULE_CSV_HEADER, build_linear, dump_schedule
from .lrdm_state import ConfigError, LRDMState, RunConfig
from .lrdm_trainer import METRICS_HEADER, ModelBundle, TrainConfig, TrainerService, build_bundle


class ModeMismatchError(ValueError):
    """Checkpoint cannot serve the requested command or flags."""


USAGE_ERRORS = (ConfigError, ModeMismatchError, FileExistsError, FileNotFoundError, DatasetFormatError)

PRIOR_BY_MODE = {"dm": "none", "lrdm": "once", "lvae": "once", "t_lrdm": "per_step"}
REPRESENTATION_MODES = ("lrdm", "t_lrdm", "lvae")
SINGLE_REPRESENTATION_MODES = ("lrdm", "lvae")
TRACE_CHAINS = 16


class PipelineService:
    """Main pipeline service that coordinates all experiment steps."""

    def __init__(self, state: LRDMState, config: RunConfig, output_dir: Optional[str] = None,
                 force: bool = False, jobs: int = 1, progress: bool = False):
        self.state = state
        self.config = config
        self.output_dir = Path(output_dir) if output_dir else None
        self.force = force
        self.jobs = max(1, jobs)
        self.progress = progress
        self.trainer = TrainerService(state)

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------
    @staticmethod
    def _result(command: str) -> Dict[str, Any]:
        return {"command": command, "success": False, "outputs": {}, "errors": [],
                "error_kind": None, "processing_info": {}}

    @staticmethod
    def _fail(results: Dict[str, Any], exc: Exception) -> Dict[str, Any]:
        results["success"] = False
        results["errors"].append(str(exc))
        results["error_kind"] = "config" if isinstance(exc, USAGE_ERRORS) else "runtime"
        results["traceback"] = traceback.format_exc()
        return results

    def _output(self, name: str) -> OutputService:
        root = self.output_dir or (self.state.get_output_path() / name)
        return OutputService(self.state, root, self.force)

    @property
    def values(self) -> Dict[str, Dict[str, Any]]:
        return self.config.values

    def _sampler_config(self, T: int, kind: Optional[str] = None, steps: Optional[int] = None,
                        seed: Optional[int] = None) -> SamplerConfig:
        """Sampler settings resolved against the checkpoint's number of timesteps."""
        s = self.values["sampler"]
        kind = kind or s["kind"]
        if steps is not None and steps != T and kind != "ddim":
            raise ConfigError(f"--steps {steps} needs the ddim sampler, got {kind}")
        if steps is None and kind == "ddim":
            steps = s["steps"]
        step_list = None
        if steps is not None and steps != T:
            if not 1 <= steps <= T:
                raise ConfigError(f"Number of sampler steps must be in [1, {T}], got {steps}")
            step_list = uniform_steps(T, steps)
        return SamplerConfig(kind=kind, steps=step_list, seed=s["seed"] if seed is None else seed)

    def load_datasets(self) -> Tuple[Dataset, Dataset]:
        """Training and held-out datasets described by the data section."""
        d = self.values["data"]
        if d["source"] == "mixture":
            train = make_mixture(d["n"], d["modes"], d["radius"], d["std"], d["seed"], d["labeled"], "train")
            heldout = make_mixture(d["n_heldout"], d["modes"], d["radius"], d["std"], d["seed"] + 1,
                                   d["labeled"], "heldout")
            return train, heldout

        full = load_csv_dataset(d["path"], d["has_labels"])
        if d["heldout_path"]:
            heldout = load_csv_dataset(d["heldout_path"], d["has_labels"], "heldout")
            train = full
        else:
            perm = np.random.default_rng(d["seed"]).permutation(full.n)
            cut = max(1, full.n // 5)
            labels = full.labels
            heldout = Dataset(full.points[perm[:cut]], None if labels is None else labels[perm[:cut]],
                              "heldout", full.spec, d["seed"], full.num_classes)
            train = Dataset(full.points[perm[cut:]], None if labels is None else labels[perm[cut:]],
                            "train", full.spec, d["seed"], full.num_classes)
        classes = max(train.num_classes, heldout.num_classes)
        train.num_classes = heldout.num_classes = classes
        return train, heldout

    def _load_bundle(self, checkpoint: str, modes: Sequence[str], command: str) -> ModelBundle:
        bundle = load_checkpoint(checkpoint)
        if bundle.mode not in modes:
            raise ModeMismatchError(f"{command} needs a checkpoint of mode {'/'.join(modes)}, "
                                    f"but {checkpoint} holds mode {bundle.mode}")
        return bundle

    @staticmethod
    def _check_class_id(bundle: ModelBundle, class_id: Optional[int], checkpoint: str):
        classes = bundle.denoiser.num_classes
        if classes and class_id is None:
            raise ModeMismatchError(f"{checkpoint} is class-conditional ({classes} classes); pass --class-id")
        if not classes and class_id is not None:
            raise ModeMismatchError(f"--class-id {class_id} given but {checkpoint} is not class-conditional")
        if class_id is not None and not 0 <= class_id < classes:
            raise ModeMismatchError(f"--class-id must be in [0, {classes}) for {checkpoint}, got {class_id}")

    def _eval_points(self, bundle: ModelBundle, input_path: Optional[str] = None,
                     n: Optional[int] = None) -> Dataset:
        if input_path:
            data = load_csv_dataset(input_path, self.values["data"]["has_labels"])
        else:
            _, data = self.load_datasets()
        data = data.subset(n or self.values["analysis"]["n_eval"])
        if data.dim != bundle.data_dim:
            raise ModeMismatchError(f"Input points have dimension {data.dim}, checkpoint expects {bundle.data_dim}")
        if bundle.denoiser.num_classes and data.labels is None:
            raise ModeMismatchError("Class-conditional checkpoint needs labeled input points")
        return data

    def _labels(self, bundle: ModelBundle, data: Dataset):
        return data.labels if bundle.denoiser.num_classes else None

    def _draw_samples(self, bundle: ModelBundle, cfg: SamplerConfig, n: int,
                      class_id: Optional[int]) -> np.ndarray:
        sampler = SamplerService(bundle.schedule)
        net = bundle.eval_denoiser()
        shard = self.values["sampler"]["shard_size"]
        z = sampler.sample_sharded(net, cfg, n, bundle.latent_dim, bundle.parameterization, class_id,
                                   PRIOR_BY_MODE[bundle.mode], self.jobs, shard)
        return bundle.decode(z)

    # ------------------------------------------------------------------
    # commands
    # ------------------------------------------------------------------
    def run_make_data(self) -> Dict[str, Any]:
        """Generate the configured mixture and write train/held-out CSV files."""
        results = self._result("make-data")
        try:
            if self.values["data"]["source"] != "mixture":
                raise ConfigError("make-data needs data.source=mixture")
            train, heldout = self.load_datasets()
            out = self._output("data")
            results["outputs"]["train"] = out.record("train", Path(save_csv_dataset(out.path_for("train.csv"), train)))
            results["outputs"]["heldout"] = out.record("heldout", Path(save_csv_dataset(out.path_for("heldout.csv"), heldout)))
            results["outputs"]["config"] = out.write_config_echo(self.config.to_dict())
            results["processing_info"] = {"train_points": train.n, "heldout_points": heldout.n,
                                          "dim": train.dim, "num_classes": train.num_classes}
            results["success"] = True
        except Exception as e:
            self._fail(results, e)
        return results

    def run_train(self, lambdas: Optional[Sequence[float]] = None, resume: Optional[str] = None,
                  dm_baseline: Optional[str] = None) -> Dict[str, Any]:
        """
        Train one model, or one model per KL weight in ``lambdas``.

        A sweep also trains a plain DM with the same schedule and trainer
        settings (or loads ``dm_baseline``) so each run's sample energy can be
        compared with the baseline's.

        Args:
            lambdas: KL weights for a sweep (representation modes only)
            resume: Checkpoint to continue from
            dm_baseline: Plain-DM checkpoint to compare a sweep against

        Returns:
            Pipeline results
        """
        results = self._result("train")
        try:
            train_ds, heldout = self.load_datasets()
            if dm_baseline and not lambdas:
                raise ConfigError("--dm-baseline only applies to a --lambdas sweep")
            if not lambdas:
                out = self._output("train")
                results["processing_info"]["run"] = self._train_one(self.config, train_ds, out, resume)
                results["outputs"] = dict(out.written)
                results["success"] = True
                return results

            if self.values["model"]["mode"] not in REPRESENTATION_MODES:
                raise ConfigError("A lambda sweep needs model.mode lrdm, t_lrdm or lvae")
            if resume:
                raise ConfigError("--resume cannot be combined with --lambdas")
            root = self._output("train")
            if dm_baseline:
                baseline = self._load_bundle(dm_baseline, ("dm",), "A sweep baseline")
            else:
                config = self.config.copy()
                config.set("model.mode", "dm")
                config.validate()
                out = OutputService(self.state, root.output_dir / "dm_baseline", self.force)
                self._train_one(config, train_ds, out, None)
                baseline = load_checkpoint(out.written["checkpoint"])
                results["outputs"]["dm_baseline"] = dict(out.written)
            dm_energy = self._sample_energy(baseline, heldout)
            sweep_rows = []
            for lam in lambdas:
                config = self.config.copy()
                config.set("trainer.lam", float(lam))
                config.validate()
                out = OutputService(self.state, root.output_dir / f"lam_{lam:g}", self.force)
                info = self._train_one(config, train_ds, out, None)
                bundle = load_checkpoint(out.written["checkpoint"])
                sweep_rows.append({"lam": float(lam), "final_loss": info["final_loss"],
                                   **self._representation_metrics(bundle, heldout),
                                   "energy": self._sample_energy(bundle, heldout)})
                results["outputs"][f"lam_{lam:g}"] = dict(out.written)
            header = ["lam", "final_loss", "rmse", "mse", "variance", "kl_per_dim", "energy"]
            results["outputs"]["sweep"] = root.write_rows(sweep_rows, header, "sweep.csv")
            summary = lambda_sweep_summary(sweep_rows, dm_energy)
            summary["dm_energy"] = dm_energy
            results["outputs"]["sweep_summary"] = root.write_json(summary, "sweep_summary.json")
            results["processing_info"]["sweep"] = summary
            results["success"] = True
        except Exception as e:
            self._fail(results, e)
        return results

    def _train_one(self, config: RunConfig, train_ds: Dataset, out: OutputService,
                   resume: Optional[str]) -> Dict[str, Any]:
        values = config.to_dict()
        out.path_for("checkpoint.lrdm")  # fail before training, not after
        if resume:
            bundle = load_checkpoint(resume)
            if bundle.config["model"] != values["model"] or bundle.config["schedule"] != values["schedule"]:
                raise ModeMismatchError(f"Checkpoint {resume} was trained with a different model/schedule config")
            rng = restore_rng(bundle.rng_state, values["trainer"]["seed"])
            bundle.config = values
        else:
            bundle = build_bundle(values, train_ds.dim, train_ds.num_classes)
            rng = np.random.default_rng(values["trainer"]["seed"])

        if bundle.first_stage is not None and bundle.first_stage.scale is None:
            fs_rng = np.random.default_rng([values["trainer"]["seed"], 1])
            bundle.first_stage_ema = self.trainer.train_first_stage(bundle.first_stage, train_ds.points,
                                                                    values["first_stage"], fs_rng, self.progress)

        cfg = TrainConfig.from_config(values)

        def checkpoint_fn(b: ModelBundle, _metrics: List[Dict[str, Any]]):
            path = out.path_for(f"checkpoint_step{b.step}.lrdm")
            out.record(f"checkpoint_step{b.step}", Path(save_checkpoint(path, b)))

        start = bundle.step
        metrics = self.trainer.train(cfg, bundle, train_ds, rng, checkpoint_fn, self.progress)
        out.write_rows(metrics, METRICS_HEADER, "metrics.csv")
        out.record("checkpoint", Path(save_checkpoint(out.path_for("checkpoint.lrdm"), bundle)))
        out.write_config_echo(values)

        final_loss = float(np.mean([m["loss_total"] for m in metrics[-max(1, len(metrics) // 10):]])) if metrics else float("nan")
        info = {"mode": cfg.mode, "lam": cfg.lam, "start_step": start, "steps": bundle.step,
                "final_loss": final_loss, "parameters": bundle.denoiser.num_parameters()}
        out.write_summary_report("LRDM Training Summary", {
            "Run": {"mode": cfg.mode, "parameterization": cfg.parameterization.value,
                    "weighting": cfg.weighting.value, "lambda": cfg.lam, "T": bundle.schedule.T},
            "Optimization": {"start step": start, "final step": bundle.step, "batch size": cfg.batch_size,
                             "learning rate": cfg.lr, "final loss (last 10%)": final_loss},
            "Networks": {"denoiser parameters": bundle.denoiser.num_parameters(),
                         "encoder parameters": 0 if bundle.encoder is None else bundle.encoder.num_parameters(),
                         "first stage scale": None if bundle.first_stage is None else bundle.first_stage.scale},
        })
        return info

    def _sample_energy(self, bundle: ModelBundle, heldout: Dataset) -> float:
        """Energy distance between fresh samples (split evenly over classes) and the held-out points."""
        cfg = self._sampler_config(bundle.schedule.T)
        n = min(self.values["sampler"]["n"], heldout.n)
        classes = bundle.denoiser.num_classes
        if classes:
            per_class = max(1, n // classes)
            samples = np.concatenate([self._draw_samples(bundle, cfg, per_class, c) for c in range(classes)])
        else:
            samples = self._draw_samples(bundle, cfg, n, None)
        return energy_distance(samples, heldout.points, self.values["analysis"]["energy_max_points"],
                               self.values["sampler"]["seed"])

    def _representation_metrics(self, bundle: ModelBundle, heldout: Dataset) -> Dict[str, float]:
        a = self.values["analysis"]
        data = heldout.subset(a["n_eval"])
        labels = self._labels(bundle, data)
        cfg = self._sampler_config(bundle.schedule.T, kind="ddim")
        metrics = reconstruction_metrics(bundle, data.points, labels, self.values["sampler"]["seed"],
                                         cfg.steps, a["recon_resamples"])
        metrics["kl_per_dim"] = self._kl_per_dim(bundle, data)
        return metrics

    @staticmethod
    def _kl_per_dim(bundle: ModelBundle, data: Dataset) -> float:
        enc = bundle.encoder
        z0 = bundle.latents(data.points)
        enc_labels = data.labels if enc.num_classes else None
        if enc.timestep_conditional:
            grid = default_t_grid(bundle.schedule.T)
            return float(np.mean(kl_curve(enc, z0, grid, enc_labels).kl)) / enc.repr_dim
        with no_grad():
            mu, logvar = enc.encode(z0, None, enc_labels)
        return float(np.mean(kl_standard_normal_values(mu.values, logvar.values))) / enc.repr_dim

    def run_sample(self, checkpoint: str, n: Optional[int] = None, kind: Optional[str] = None,
                   steps: Optional[int] = None, class_id: Optional[int] = None,
                   trace: bool = False) -> Dict[str, Any]:
        """Draw samples (and optionally a per-step trace) from a checkpoint."""
        results = self._result("sample")
        try:
            bundle = load_checkpoint(checkpoint)
            self._check_class_id(bundle, class_id, checkpoint)
            cfg = self._sampler_config(bundle.schedule.T, kind, steps)
            n = n or self.values["sampler"]["n"]
            samples = self._draw_samples(bundle, cfg, n, class_id)
            out = self._output("sample")
            results["outputs"]["samples"] = out.write_points(samples, "samples.csv")
            if trace:
                results["outputs"]["trace"] = self._write_trace(bundle, cfg, min(n, TRACE_CHAINS), class_id, out)
            results["outputs"]["config"] = out.write_config_echo(self.config.to_dict())
            results["processing_info"] = {"mode": bundle.mode, "samples": n, "sampler": cfg.kind,
                                          "steps": len(cfg.resolved_steps(bundle.schedule.T))}
            results["success"] = True
        except Exception as e:
            self._fail(results, e)
        return results

    def _write_trace(self, bundle: ModelBundle, cfg: SamplerConfig, n: int, class_id: Optional[int],
                     out: OutputService) -> str:
        rng = np.random.default_rng(cfg.seed)
        prior = PRIOR_BY_MODE[bundle.mode]
        repr_dim = bundle.denoiser.repr_dim
        cond = rng.standard_normal((n, repr_dim)) if prior == "once" else None
        cond_fn = (lambda t: rng.standard_normal((n, repr_dim))) if prior == "per_step" else None
        trace = SamplerService(bundle.schedule).sample_loop(bundle.eval_denoiser(), cfg, n, bundle.latent_dim,
                                                            bundle.parameterization, cond=cond, cond_fn=cond_fn,
                                                            class_id=class_id, record=True, rng=rng)
        return out.write_table(trace.to_rows(), SampleTrace.header(bundle.latent_dim), "trace.csv")

    def run_reconstruct(self, checkpoint: str, input_path: Optional[str] = None, n: Optional[int] = None,
                        mode: Optional[str] = None, steps: Optional[int] = None) -> Dict[str, Any]:
        """Encode and decode points through a representation model."""
        results = self._result("reconstruct")
        try:
            bundle = self._load_bundle(checkpoint, REPRESENTATION_MODES, "reconstruct")
            data = self._eval_points(bundle, input_path, n)
            mode = mode or self.values["analysis"]["recon_mode"]
            cfg = self._sampler_config(bundle.schedule.T, mode, steps)
            x_hat = reconstruct(bundle, data.points, mode, cfg.steps, cfg.seed, self._labels(bundle, data))
            out = self._output("reconstruct")
            header = [f"x_{i}" for i in range(data.dim)] + [f"x_hat_{i}" for i in range(data.dim)]
            rows = [list(a) + list(b) for a, b in zip(data.points, x_hat)]
            results["outputs"]["reconstructions"] = out.write_table(rows, header, "reconstructions.csv")
            results["outputs"]["config"] = out.write_config_echo(self.config.to_dict())
            mse = float(np.mean(np.sum((data.points - x_hat) ** 2, axis=-1)))
            results["processing_info"] = {"mode": bundle.mode, "points": data.n, "mse": mse, "rmse": float(np.sqrt(mse))}
            results["success"] = True
        except Exception as e:
            self._fail(results, e)
        return results

    def run_interpolate(self, checkpoint: str, index_a: int = 0, index_b: int = 1,
                        n_points: Optional[int] = None, mode: Optional[str] = None,
                        input_path: Optional[str] = None, steps: Optional[int] = None) -> Dict[str, Any]:
        """Slerp between the representations and x_T of two points."""
        results = self._result("interpolate")
        try:
            bundle = self._load_bundle(checkpoint, SINGLE_REPRESENTATION_MODES, "interpolate")
            data = self._eval_points(bundle, input_path, max(index_a, index_b) + 1)
            if max(index_a, index_b) >= data.n:
                raise ConfigError(f"Point indices {index_a}, {index_b} exceed the {data.n} available points")
            mode = mode or self.values["analysis"]["recon_mode"]
            n_points = n_points or self.values["analysis"]["interp_points"]
            cfg = self._sampler_config(bundle.schedule.T, mode, steps)
            class_id = None if data.labels is None or not bundle.denoiser.num_classes else int(data.labels[index_a])
            path = interpolate_pair(bundle, data.points[index_a], data.points[index_b], n_points, mode,
                                    cfg.steps, cfg.seed, class_id)
            out = self._output("interpolate")
            taus = np.linspace(0.0, 1.0, n_points)
            header = ["tau"] + [f"x_{i}" for i in range(path.shape[1])]
            results["outputs"]["interpolation"] = out.write_table(
                [[tau, *row] for tau, row in zip(taus, path)], header, "interpolation.csv")
            results["outputs"]["config"] = out.write_config_echo(self.config.to_dict())
            results["processing_info"] = {"mode": bundle.mode, "points": n_points, "sampler": mode}
            results["success"] = True
        except Exception as e:
            self._fail(results, e)
        return results

    def run_eval(self, checkpoint: str) -> Dict[str, Any]:
        """Distortion curve, KL curve, energy distance and reconstruction metrics."""
        results = self._result("eval")
        try:
            bundle = load_checkpoint(checkpoint)
            a = self.values["analysis"]
            seed = self.values["sampler"]["seed"]
            _, heldout = self.load_datasets()
            if heldout.dim != bundle.data_dim:
                raise ModeMismatchError(f"Held-out data has dimension {heldout.dim}, checkpoint expects {bundle.data_dim}")
            data = heldout.subset(a["n_eval"])
            labels = self._labels(bundle, data)
            out = self._output("eval")
            report: Dict[str, Any] = {"mode": bundle.mode, "step": bundle.step}

            t_grid = default_t_grid(bundle.schedule.T, a["t_grid_points"])
            curve = distortion_curve(bundle.schedule, bundle.eval_denoiser(), data.points, bundle.parameterization,
                                     bundle.first_stage, t_grid, a["n_mc"], np.random.default_rng(seed),
                                     bundle.encoder, labels)
            results["outputs"]["distortion"] = out.write_rows(curve.to_rows(), ["t", "z_rmse", "x_rmse", "count"],
                                                              "distortion.csv")
            report["distortion_spearman"] = spearman_rho(curve.t, curve.z_rmse)

            if bundle.encoder is not None and bundle.encoder.timestep_conditional:
                enc_labels = data.labels if bundle.encoder.num_classes else None
                kl = kl_curve(bundle.encoder, bundle.latents(data.points), t_grid, enc_labels)
                results["outputs"]["kl_curve"] = out.write_rows(kl.to_rows(), ["t", "kl"], "kl_curve.csv")
                report["kl_ratio_T_to_1"] = float(kl.kl[-1] / kl.kl[0]) if kl.kl[0] > 0 else float("inf")

            report["energy_distance"] = self._sample_energy(bundle, heldout)
            null = energy_null(heldout.points, a["null_resamples"], seed, a["energy_max_points"])
            report["energy_null_median"] = null["median"]
            report["energy_ratio_to_null"] = (report["energy_distance"] / null["median"]
                                              if null["median"] > 0 else float("inf"))

            if bundle.encoder is not None:
                report["reconstruction"] = self._representation_metrics(bundle, heldout)

            results["outputs"]["eval"] = out.write_json(report, "eval.json")
            results["outputs"]["config"] = out.write_config_echo(self.config.to_dict())
            sections = {"Model": {"mode": bundle.mode, "step": bundle.step},
                        "Distribution": {"energy distance": report["energy_distance"],
                                         "null median": report["energy_null_median"],
                                         "ratio to null": report["energy_ratio_to_null"]},
                        "Distortion": {"spearman rho(t, rmse)": report["distortion_spearman"]}}
            if "reconstruction" in report:
                sections["Reconstruction"] = dict(report["reconstruction"])
            results["outputs"]["summary"] = out.write_summary_report("LRDM Evaluation Summary", sections)
            results["processing_info"] = report
            results["success"] = True
        except Exception as e:
            self._fail(results, e)
        return results

    def run_schedule_dump(self) -> Dict[str, Any]:
        """Write the per-timestep schedule coefficients and ELBO weights."""
        results = self._result("schedule-dump")
        try:
            s = self.values["schedule"]
            schedule = build_linear(s["T"], s["beta1"], s["betaT"], s["reverse_variance"])
            out = self._output("schedule")
            results["outputs"]["schedule"] = out.write_rows(dump_schedule(schedule), SCHEDULE_CSV_HEADER,
                                                            "schedule.csv")
            results["processing_info"] = {"T": schedule.T, "alpha_bar_T": float(schedule.alpha_bar[-1])}
            results["success"] = True
        except Exception as e:
            self._fail(results, e)
        return results

    def run_pca_grid(self, checkpoint: str, grid_n: Optional[int] = None, extent: Optional[float] = None,
                     class_id: Optional[int] = None) -> Dict[str, Any]:
        """Decode a grid on the two leading principal directions of the representations."""
        results = self._result("pca-grid")
        try:
            bundle = self._load_bundle(checkpoint, SINGLE_REPRESENTATION_MODES, "pca-grid")
            self._check_class_id(bundle, class_id, checkpoint)
            a = self.values["analysis"]
            grid_n = grid_n or a["pca_grid_n"]
            extent = a["pca_extent"] if extent is None else extent
            data = self._eval_points(bundle, None, None)
            enc_labels = None
            if bundle.encoder.num_classes:
                enc_labels = np.full(data.n, class_id)
            grid = pca_grid(bundle.encoder, bundle.latents(data.points), grid_n, extent, enc_labels)
            cfg = self._sampler_config(bundle.schedule.T, "ddim")
            decoded = decode_representations(bundle, grid.points, cfg.seed, "ddim", cfg.steps, class_id)
            out = self._output("pca_grid")
            header = ([f"r_{i}" for i in range(grid.points.shape[1])]
                      + [f"x_{i}" for i in range(decoded.shape[1])])
            rows = [list(r) + list(x) for r, x in zip(grid.points, decoded)]
            results["outputs"]["pca_grid"] = out.write_table(rows, header, "pca_grid.csv")
            results["outputs"]["config"] = out.write_config_echo(self.config.to_dict())
            results["processing_info"] = {"points": len(rows),
                                          "explained_variance": grid.explained_variance.tolist()}
            results["success"] = True
        except Exception as e:
            self._fail(results, e)
        return results

    def get_pipeline_info(self) -> Dict[str, Any]:
        """Get pipeline service information."""
        return {
            "output_root": str(self.output_dir or self.state.get_output_path()),
            "jobs": self.jobs,
            "force": self.force,
            "mode": self.values["model"]["mode"],
        }
