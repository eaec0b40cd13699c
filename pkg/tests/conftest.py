"""Shared fixtures.

``tiny`` is a seconds-scale dataset with an untrained codec, for plumbing
tests. ``desk`` is the desk-scale pipeline (data, trained codec, the
masking-ablation encoders, frozen heads), built lazily once per session
and shared by every test that needs trained models.
"""
from dataclasses import replace
from functools import cached_property
from pathlib import Path

import numpy as np
import pytest
import torch

from vertikit.codec import CodecConfig, PatchCodec, codec_checkpoint, load_codec, train_codec
from vertikit.dataset import DataConfig, collect_dataset, load_dataset
from vertikit.encoder import ContextEncoder, PretrainConfig, encoder_checkpoint, load_encoder
from vertikit.harness import Backbone, ExperimentConfig, prepare_data, run_ablation, train_downstream

torch.set_num_threads(1)

TINY_DATA = DataConfig(seeds=3, split="2:1", episodes_per_seed=2, steps_per_episode=30)
DESK_DATA = DataConfig(seeds=10, split="9:1", episodes_per_seed=4, steps_per_episode=80)
DESK_CODEC = CodecConfig(epochs=6, seed=0)
DESK_PRETRAIN = PretrainConfig(epochs=8, seed=0)
DESK_SEEDS = (0, 1, 2)


class Tiny:
    def __init__(self, root: Path):
        self.root = root
        self.data_dir = collect_dataset(TINY_DATA, root / "data")
        self.dataset = load_dataset(self.data_dir)
        torch.manual_seed(0)
        codec = PatchCodec()
        self.codec_ckpt = codec_checkpoint(codec)
        self.codec_path = root / "codec.vckpt"
        self.codec_ckpt.save(self.codec_path)
        self.codec, self.codec_checksum = load_codec(self.codec_path)
        torch.manual_seed(1)
        self.encoder_ckpt = encoder_checkpoint(ContextEncoder(), {"codec_checksum": self.codec_checksum})
        self.encoder_path = root / "encoder.vckpt"
        self.encoder_ckpt.save(self.encoder_path)
        self.data = prepare_data(self.dataset, self.codec)

    def backbone(self) -> Backbone:
        enc, ckpt = load_encoder(self.encoder_path, self.codec_checksum)
        return Backbone(self.codec, self.codec_checksum, enc, ckpt.checksum)


class Desk:
    def __init__(self, root: Path):
        self.root = root

    @cached_property
    def data_dir(self) -> Path:
        return collect_dataset(DESK_DATA, self.root / "data")

    @cached_property
    def dataset(self):
        return load_dataset(self.data_dir)

    @cached_property
    def codec_ckpt(self):
        patches = np.concatenate([e.patches for e in self.dataset.split("train")])
        ckpt = train_codec(patches, DESK_CODEC)
        ckpt.save(self.root / "codec.vckpt")
        return ckpt

    @cached_property
    def codec(self):
        return load_codec(self.codec_ckpt)[0]

    @property
    def codec_checksum(self) -> str:
        return self.codec_ckpt.checksum

    @cached_property
    def data(self) -> dict:
        return prepare_data(self.dataset, self.codec)

    @cached_property
    def masking(self):
        """Masking ablation over DESK_SEEDS; its 75% encoders serve every other desk test."""
        return run_ablation("masking", self.data, Backbone(self.codec, self.codec_checksum), DESK_PRETRAIN,
                            ExperimentConfig(), seeds=DESK_SEEDS, out=self.root / "ablation",
                            keep_encoders=True)

    def backbone(self, ratio: float = 0.75, seed: int = 0) -> Backbone:
        self.masking
        arm = {0.75: "75", 0.9: "90"}[ratio]
        enc, ckpt = load_encoder(self.root / "ablation" / f"encoder_masking_{arm}_seed{seed}.vckpt",
                                 self.codec_checksum)
        return Backbone(self.codec, self.codec_checksum, enc, ckpt.checksum)

    @cached_property
    def _heads(self) -> dict:
        return {}

    def head(self, task: str, mode: str = "frozen", seed: int = 0):
        """(checkpoint, report) of a desk-trained downstream model on the 75% seed-0 encoder."""
        key = (task, mode, seed)
        if key not in self._heads:
            cfg = replace(ExperimentConfig(), task=task, mode=mode, seed=seed)
            self._heads[key] = train_downstream(cfg, self.data, self.backbone(0.75, 0),
                                                out=self.root / "tasks" / f"seed{seed}")
        return self._heads[key]


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    return Tiny(tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return Desk(tmp_path_factory.mktemp("desk"))


@pytest.fixture
def flat_map():
    from vertikit.terrain import HeightMap

    # 4 m x 4 m flat plane centred on the world origin
    return HeightMap(np.zeros((161, 161)), 0.025, origin=(-2.0, -2.0))


# acceptance verdicts, printed as one line per criterion after the run
ACCEPTANCE = {}


def record_criterion(number: int, name: str, status: str, detail: str = "") -> None:
    ACCEPTANCE[number] = (name, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {status:<7} {name}: {detail}")
