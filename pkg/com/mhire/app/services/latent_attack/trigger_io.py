import logging
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from com.mhire.app.config.errors import ArtifactIOError
from com.mhire.app.services.latent_attack.latent_attack import apply_trigger
from com.mhire.app.services.latent_attack.latent_attack_schema import TriggerHeader, TriggerSpec
from com.mhire.app.services.model_zoo.model_io import TRIGGER_MAGIC, read_container, split_blobs, write_container
from com.mhire.app.services.model_zoo.model_zoo_schema import ParameterShape

logger = logging.getLogger(__name__)

PREVIEW_SCALE = 4


def save_trigger(trigger: TriggerSpec, path: Path) -> None:
    """Mask and pattern blobs in the model container format, so a recorded trigger can be replayed later."""
    header = TriggerHeader(
        image_shape=list(trigger.mask.shape),
        inject_layer=trigger.inject_layer,
        target_label=trigger.target_label,
        target_name=trigger.target_name,
        seed=trigger.seed,
    )
    write_container(path, TRIGGER_MAGIC, header, [trigger.mask, trigger.pattern])
    logger.info(f"Saved trigger for K_t={trigger.inject_layer} to {path}")


def load_trigger(path: Path) -> TriggerSpec:
    header, blob = read_container(path, TRIGGER_MAGIC, TriggerHeader)
    shapes = [ParameterShape(name=n, shape=header.image_shape) for n in ("mask", "pattern")]
    arrays = split_blobs(blob, shapes)
    return TriggerSpec(
        mask=arrays["mask"],
        pattern=arrays["pattern"],
        inject_layer=header.inject_layer,
        target_label=header.target_label,
        target_name=header.target_name,
        seed=header.seed,
    )


def _to_image(array: np.ndarray) -> Image.Image:
    pixels = np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)
    if pixels.shape[0] == 1:
        image = Image.fromarray(pixels[0])
    else:
        image = Image.fromarray(np.ascontiguousarray(np.moveaxis(pixels[:3], 0, -1)))
    return image.resize((image.width * PREVIEW_SCALE, image.height * PREVIEW_SCALE), Image.Resampling.NEAREST)


def export_trigger_png(trigger: TriggerSpec, path: Path, sample: Optional[np.ndarray] = None) -> None:
    """Mask, masked pattern and (optionally) a poisoned sample side by side."""
    panels = [_to_image(trigger.mask), _to_image(trigger.pattern * trigger.mask)]
    if sample is not None:
        panels.append(_to_image(apply_trigger(sample, trigger)))
    mode = "L" if trigger.mask.shape[0] == 1 else "RGB"
    sheet = Image.new(mode, (sum(p.width for p in panels), panels[0].height))
    left = 0
    for panel in panels:
        sheet.paste(panel.convert(mode), (left, 0))
        left += panel.width
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        sheet.save(path)
    except OSError as e:
        logger.error(f"Error writing trigger preview {path}: {str(e)}")
        raise ArtifactIOError("io-error", f"cannot write {path}: {e}")
