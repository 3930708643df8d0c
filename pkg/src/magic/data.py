"""In-memory dataset of synthetic scenes, masks, and modality maps.

Scenes are materialized once per seed (they are cheap 32x32 renders) so
training loops can gather batches by index without regeneration cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import toyworld as tw


@dataclass
class Batch:
    images: np.ndarray  # [B,1,S,S] float32
    masks: np.ndarray  # [B,1,S,S] float32 in {0,1}
    class_ids: np.ndarray  # [B] int64 shape counts
    conds: dict  # modality -> [B,C,S,S] float32

    def __getitem__(self, i):
        return (self.images, self.masks, self.class_ids)[i]


class SceneDataset:
    """Fixed seed list with one mask per seed (ratio ~ Uniform(0,1))."""

    def __init__(self, seeds, size=32, modalities=(), scene_cfg=None):
        self.seeds = list(seeds)
        self.size = size
        self.modalities = tuple(modalities)
        cfg = scene_cfg or tw.SceneConfig(size=size)
        n = len(self.seeds)
        self.images = np.zeros((n, 1, size, size), dtype=np.float32)
        self.masks = np.zeros((n, 1, size, size), dtype=np.float32)
        self.class_ids = np.zeros(n, dtype=np.int64)
        self.conds = {
            m: np.zeros((n, tw.modality_channels(m), size, size), dtype=np.float32)
            for m in self.modalities
            if m != "class_label"
        }
        for i, seed in enumerate(self.seeds):
            scene = tw.generate_scene(seed, cfg)
            self.images[i] = scene.image
            self.masks[i] = tw.random_mask(seed, size)
            self.class_ids[i] = scene.class_count_label
            for m in self.conds:
                self.conds[m][i] = tw.extract_modality(scene, m)

    def __len__(self):
        return len(self.seeds)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(
            images=self.images[idx],
            masks=self.masks[idx],
            class_ids=self.class_ids[idx],
            conds={m: arr[idx] for m, arr in self.conds.items()},
        )


def split_dataset(split, size=32, modalities=(), limit=None):
    seeds = list(tw.split_seeds(split))
    if limit is not None:
        seeds = seeds[:limit]
    return SceneDataset(seeds, size=size, modalities=modalities)
