import logging
import os

import numpy as np

from app import imaging
from app.dataset import (ImageStore, inspect_dimensions, load_manifest, save_manifest, scan_dataset,
                         stratified_split, subset_manifest)
from app.exceptions import (ArtifactMismatch, GrainNotFound, ImageDecodeError, ModelFileError,
                            TrainingDiverged, UsageError)
from app.explain import global_importance, grid_superpixels, mask_aware_superpixels, render_overlay
from app.metrics import metrics_report, write_evaluation
from app.model import load_model, save_model
from app.models import CLASS_NAMES, CannyConfig, DatasetStats, TrainingConfig
from app.run import Run
from app.training import fit, sweep, write_epoch_log, write_sweep
from modules.explainers import EXPLAINERS


class Brain:
    """Runs pipeline stages, keeping loaded models and decoded images across stages."""

    def __init__(self):
        self.modelCache = {}
        self.imageStores = {}

    def getModel(self, path):
        path = os.path.abspath(path)
        if not os.path.isfile(path):
            raise ModelFileError("io", f"model file {path} not found")
        stamp = os.path.getmtime(path)
        cached = self.modelCache.get(path)
        if cached is not None and cached[0] == stamp:
            return cached[1]
        model = load_model(path)
        self.modelCache[path] = (stamp, model)
        return model

    def getImageStore(self, root, preprocess="raw", canny=None, image_size=50):
        key = (os.path.abspath(root), preprocess, image_size)
        if key not in self.imageStores:
            self.imageStores[key] = ImageStore(root, preprocess=preprocess, canny=canny,
                                               image_size=image_size)
        return self.imageStores[key]

    def entryStats(self, data, run: Run, dimensions=False):
        stats, samples = scan_dataset(data)
        if dimensions:
            stats = DatasetStats(counts=stats.counts, total=stats.total,
                                 dimensions=inspect_dimensions(data, samples))
        run.writeJson("stats.json", stats.model_dump(exclude_none=True))
        return stats

    def entrySplit(self, data, seed, ratios, manifest_path, run: Run):
        _, samples = scan_dataset(data)
        manifest = stratified_split(samples, seed, ratios)
        save_manifest(manifest, manifest_path)
        logging.info("Wrote split manifest to %s", manifest_path)
        return manifest

    def resolveManifest(self, data, manifest_path, seed, run: Run):
        if manifest_path:
            return load_manifest(manifest_path)
        return self.entrySplit(data, seed, (0.8, 0.1, 0.1), run.artifactPath("manifest.json"), run)

    def entryTrain(self, config: TrainingConfig, data, manifest, out_path, run: Run, subset=None,
                   progress=False):
        if subset:
            manifest = subset_manifest(manifest, subset)
        store = self.getImageStore(data, config.preprocess, image_size=config.image_size)
        try:
            result = fit(config, manifest, store=store, progress=progress)
        except TrainingDiverged as e:
            if e.checkpoint is not None:
                save_model(e.checkpoint, out_path)
            write_epoch_log(e.reports, run.artifactPath("epochs.csv"))
            raise

        save_model(result.model, out_path)
        write_epoch_log(result.reports, run.artifactPath("epochs.csv"))
        run.writeJson("train.json", {
            "best_epoch": result.best_epoch,
            "parameters": result.model.parameter_count(),
            "epochs": [r.model_dump(exclude={"seconds"}) for r in result.reports],
            "n_skipped": len(result.skipped),
            "skipped": result.skipped,
        })
        return result

    def checkInput(self, model, image_size):
        expected = (image_size, image_size, 3)
        if model.input_shape != expected:
            raise ArtifactMismatch(
                f"model expects input {model.input_shape}, pipeline produces {expected}")

    def entryEval(self, model_path, data, manifest, split, run: Run, preprocess="raw", image_size=50,
                  workers=0):
        model = self.getModel(model_path)
        self.checkInput(model, image_size)
        if not any(manifest.counts(split).values()):
            raise UsageError(f"split {split} is empty")
        store = self.getImageStore(data, preprocess, image_size=image_size)
        report = metrics_report(model, manifest, split, store, workers=workers)
        write_evaluation(report, run.config.outdir, extra={"split": split, "run_config": run.provenance()})
        return report

    def resolveTarget(self, target, probs):
        if target in (None, "auto"):
            return int(np.argmax(probs))
        if target not in CLASS_NAMES:
            raise UsageError(f"unknown class {target}, expected one of: {', '.join(CLASS_NAMES)}")
        return CLASS_NAMES.index(target)

    def superpixels(self, img, segmentation, grid):
        if segmentation == "grid":
            return grid_superpixels(img.height, img.width, grid)
        try:
            return mask_aware_superpixels(imaging.segment_grain(img), grid)
        except GrainNotFound:
            logging.warning("No grain found, falling back to grid superpixels")
            return grid_superpixels(img.height, img.width, grid)

    def explainImage(self, model, path, method, config, run: Run, target="auto", grid=6,
                     segmentation="mask", preprocess="raw", suffix=""):
        try:
            raw = imaging.decode_and_resize(path, model.input_shape[0])
            img = imaging.normalize(imaging.preprocess_image(raw, preprocess))
        except (ImageDecodeError, GrainNotFound) as e:
            raise UsageError(str(e))
        spmap = self.superpixels(raw, segmentation, grid)
        explain_fn, _, _, _ = EXPLAINERS[method]
        probs = model.predict(img.pixels[np.newaxis])[0]

        payload = {
            "method": method,
            "explainer": method,
            "image": str(path),
            "class_names": list(CLASS_NAMES),
            "segments": spmap.count,
            "prediction": CLASS_NAMES[int(np.argmax(probs))],
            "probabilities": probs.tolist(),
            "seed": config.seed,
            "params": {**config.model_dump(), "grid": grid, "segmentation": segmentation},
        }
        if method == "lime":
            label = self.resolveTarget(target, probs)
            explanation = explain_fn(model.predict, img, spmap, label, config)
            payload.update({
                "target": CLASS_NAMES[label],
                "weights": explanation.coefficients,
                "intercept": explanation.intercept,
                "top_k": explanation.top_k,
                "fidelity_r2": explanation.fidelity_r2,
            })
            overlay = render_overlay(img, spmap, explanation.coefficients, "lime_outline", config.top_k)
            imaging.save_png(overlay, run.artifactPath(f"explain_lime{suffix}.png"))
        else:
            explanation = explain_fn(model.predict, img, spmap, config)
            payload.update({
                "method": explanation.method,
                "phi": {name: row for name, row in zip(CLASS_NAMES, explanation.phi)},
                "base_values": explanation.base_values,
                "outputs": explanation.outputs,
            })
            for name, row in zip(CLASS_NAMES, explanation.phi):
                overlay = render_overlay(img, spmap, row, "shap_heat")
                imaging.save_png(overlay, run.artifactPath(f"explain_shap{suffix}_{name}.png"))

        run.writeJson(f"explain_{method}{suffix}.json", payload)
        return explanation, spmap

    def entryExplain(self, model_path, images, method, config, run: Run, target="auto", grid=6,
                     segmentation="mask", preprocess="raw"):
        model = self.getModel(model_path)
        if target not in (None, "auto") and target not in CLASS_NAMES:
            raise UsageError(f"unknown class {target}, expected one of: {', '.join(CLASS_NAMES)}")

        explanations = []
        for i, path in enumerate(images):
            suffix = "" if len(images) == 1 else f"_{i + 1}"
            explanation, _ = self.explainImage(model, path, method, config, run, target, grid,
                                               segmentation, preprocess, suffix)
            explanations.append(explanation)

        # mean |phi| is only comparable when every image shares the grid layout
        if method == "shap" and len(explanations) > 1 and segmentation == "grid":
            summary = global_importance(explanations)
            summary["class_names"] = list(CLASS_NAMES)
            run.writeJson("shap_global.json", summary)
        return explanations

    def entrySweep(self, grid, data, manifest, base_config, run: Run, subset=None, progress=False):
        store = self.getImageStore(data, base_config.preprocess, image_size=base_config.image_size)
        rows = sweep(grid, manifest, base_config, store=store, subset=subset, progress=progress)
        write_sweep(rows, run.artifactPath("sweep.csv"), axes=list(grid))
        return rows

    def entryPreprocess(self, image, run: Run, canny: CannyConfig, image_size=50):
        try:
            img = imaging.decode_and_resize(image, image_size)
        except ImageDecodeError as e:
            raise UsageError(str(e))
        gray = imaging.to_grayscale(img)
        imaging.save_png(gray, run.artifactPath("gray.png"))
        imaging.save_png(imaging.gaussian_blur(gray, canny.sigma), run.artifactPath("blur.png"))
        edges = imaging.canny_edges(gray, canny.low, canny.high, canny.sigma)
        imaging.save_png(edges, run.artifactPath("edges.png"))
        written = ["gray.png", "blur.png", "edges.png"]
        try:
            mask = imaging.segment_grain(img)
        except GrainNotFound as e:
            logging.warning("%s: %s", image, e)
            return written
        imaging.save_png(mask, run.artifactPath("mask.png"))
        imaging.save_png(imaging.apply_mask(img, mask), run.artifactPath("masked.png"))
        imaging.save_png(imaging.mask_contour(mask), run.artifactPath("boundary.png"))
        return written + ["mask.png", "masked.png", "boundary.png"]

    def entryRun(self, config: TrainingConfig, data, run: Run, subset=None, xai="both",
                 explain_count=3, explain_configs=None, grid=6, progress=False):
        """Split, train, evaluate on test, then explain the first test images."""
        manifest = self.entrySplit(data, config.seed, (0.8, 0.1, 0.1), run.artifactPath("manifest.json"), run)
        model_path = run.artifactPath("model.rgc")
        self.entryTrain(config, data, manifest, model_path, run, subset=subset, progress=progress)
        if subset:
            manifest = subset_manifest(manifest, subset)
        report = self.entryEval(model_path, data, manifest, "test", run, config.preprocess,
                                config.image_size, config.workers)

        methods = {"none": [], "lime": ["lime"], "shap": ["shap"], "both": ["lime", "shap"]}[xai]
        images = [os.path.join(data, r.path) for r in manifest.files("test")[:explain_count]]
        for method in methods:
            if images:
                self.entryExplain(model_path, images, method, explain_configs[method], run,
                                  grid=grid, preprocess=config.preprocess)
        return report
