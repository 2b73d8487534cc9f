"""The case analysis pipeline shared by the service worker and offline eval.

One definition of the stage sequence: standardize -> normalize -> de-noise ->
propose regions -> classify (ROI-aggregated). The service worker adds
workflow routing on top; `model eval` runs exactly this on manifest records.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import metrics
from .corpus import DatasetManifest, load_image
from .imaging import BYTE, RasterImage, gaussian_blur, normalize, resize_to_standard
from .model import NetworkSpec, Parameters, Prediction, predict_case
from .regions import ProposerSettings, propose_regions, serving_proposer


@dataclass
class PipelineSettings:
    standard_size: int = 256
    blur_sigma: float = 1.0
    proposer: ProposerSettings = field(default_factory=serving_proposer)


def preprocess(raster: RasterImage, settings: PipelineSettings) -> RasterImage:
    """Standardize to the working square size, normalize, de-noise."""
    img = resize_to_standard(raster, settings.standard_size)
    if img.value_domain == BYTE:
        img = normalize(img)
    if settings.blur_sigma > 0:
        img = gaussian_blur(img, settings.blur_sigma)
    return img


def analyze(
    img: RasterImage,
    spec: NetworkSpec,
    params: Parameters,
    settings: PipelineSettings,
):
    """Propose regions on a preprocessed image and classify the case."""
    proposals = propose_regions(img, settings.proposer)
    prediction = predict_case(spec, params, img, proposals)
    return proposals, prediction


def classify_record(manifest_path, rec, spec, params, settings: PipelineSettings) -> Prediction:
    img = preprocess(load_image(manifest_path, rec), settings)
    _, prediction = analyze(img, spec, params, settings)
    return prediction


def evaluate_manifest(
    manifest: DatasetManifest,
    manifest_path,
    spec: NetworkSpec,
    params: Parameters,
    settings: PipelineSettings | None = None,
):
    """Per-image evaluation: aggregated Prediction vs manifest class.

    Returns (confusion matrix, classification report, accuracy).
    """
    settings = settings or PipelineSettings()
    truths = []
    preds = []
    for rec in manifest.records:
        truths.append(int(rec.cls))
        preds.append(int(classify_record(manifest_path, rec, spec, params, settings).cls))
    cm = metrics.confusion_matrix(truths, preds, 3)
    report = metrics.classification_report(cm)
    return cm, report, report.accuracy
