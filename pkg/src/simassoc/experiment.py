"""End-to-end experiment helpers shared by the CLI, scripts and acceptance tests.

Dataset seeds derive from ``data.seed``: training sequences use ``seed``,
held-out evaluation ``seed + 1`` and the decimation stress set ``seed + 2``.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Optional

import numpy as np
import torch

from .assoc import MatchConfig, track_sequence
from .baseline import iou_track_sequence
from .io import RunConfig
from .loss import LossWeights
from .metrics import EvalReport, evaluate_many, similarity_margin
from .net import SimDecoder
from .synth import SyntheticSequence, make_dataset
from .train import clip_loss, fit, sample_clip

# The end-to-end acceptance setup. Scene and model sizes are fixed by the
# acceptance contract; the optimizer schedule is this package's own recipe.
ACCEPTANCE = {
    "scene": {"num_objects": 8, "d_feat": 8, "frame_count": 20, "p_fn": 0.05, "p_fp": 0.05,
              "sigma_box": 0.02, "fps_decimation": 3},
    "model": {"d_model": 32, "d_feat": 8, "num_layers": 2, "heads": 2},
    "train": {"clip_len": 5, "lr": 1e-3, "epochs": 5, "decay_every": 3, "clips_per_sequence": 4},
    "data": {"train_sequences": 50, "eval_sequences": 10, "seed": 1},
}

STRESS_DECIMATION = 6

# Loss-term combinations of the ablation grid, as (spatial, temporal, crossclip) switches.
ABLATION_GRID = (
    ("spatial", (1, 0, 0)),
    ("temporal", (0, 1, 0)),
    ("crossclip", (0, 0, 1)),
    ("temporal+crossclip", (0, 1, 1)),
    ("spatial+temporal", (1, 1, 0)),
    ("spatial+crossclip", (1, 0, 1)),
    ("full", (1, 1, 1)),
)


def acceptance_config() -> RunConfig:
    return RunConfig.from_dict(ACCEPTANCE)


def ablation_weights(base: LossWeights, switches) -> LossWeights:
    s, t, c = switches
    return replace(base, spatial=base.spatial * s, temporal=base.temporal * t, crossclip=base.crossclip * c)


def train_sequences(cfg: RunConfig) -> list[SyntheticSequence]:
    return make_dataset(cfg.scene, cfg.data.train_sequences, cfg.data.seed)


def eval_sequences(cfg: RunConfig, decimation: Optional[int] = None) -> list[SyntheticSequence]:
    if decimation is None or decimation == cfg.scene.fps_decimation:
        return make_dataset(cfg.scene, cfg.data.eval_sequences, cfg.data.seed + 1)
    return make_dataset(replace(cfg.scene, fps_decimation=decimation), cfg.data.eval_sequences, cfg.data.seed + 2)


def build_model(cfg: RunConfig) -> SimDecoder:
    torch.manual_seed(cfg.train.seed)
    return SimDecoder(cfg.model)


def train_model(cfg: RunConfig, sequences=None, weights: LossWeights | None = None,
                on_step: Optional[Callable[[dict], None]] = None):
    """Fresh model trained on ``sequences`` (default: the config's training set)."""
    cfg.validate()
    sequences = train_sequences(cfg) if sequences is None else sequences
    model = build_model(cfg)
    history = fit(model, sequences, cfg.train, weights or cfg.loss, cfg.match, on_step=on_step)
    return model, history


def gt_table(seq: SyntheticSequence) -> list:
    return [(t, int(i), b, float(v)) for t, f in enumerate(seq.gt_frames())
            for b, i, v in zip(f.boxes, f.ids, f.visibility)]


def evaluate_tracker(track_fn, sequences) -> EvalReport:
    return evaluate_many({f"seq_{k:04d}": (track_fn(s), gt_table(s)) for k, s in enumerate(sequences)})


def evaluate_model(model: SimDecoder, sequences, match: MatchConfig | None = None) -> EvalReport:
    model.eval()
    return evaluate_tracker(lambda s: track_sequence(model, s.frames(), match), sequences)


def evaluate_iou_baseline(sequences) -> EvalReport:
    return evaluate_tracker(lambda s: iou_track_sequence(s.frames()), sequences)


def crossclip_margin(model: SimDecoder, sequences, cfg: RunConfig, clips_per_sequence: int = 1,
                     seed: int = 12345) -> tuple[float, float, float]:
    """Pooled intra-ID minus inter-ID mean of final-layer cross-clip S over held-out clips."""
    rng = np.random.default_rng(seed)
    tcfg = replace(cfg.train, rotate_features=False)
    pos_sum = neg_sum = 0.0
    pos_n = neg_n = 0
    with torch.no_grad():
        for seq in sequences:
            for _ in range(clips_per_sequence):
                clip = sample_clip(seq, tcfg, rng)
                _, extras = clip_loss(model, clip, cfg.loss, tcfg, cfg.match, keep_matrices=True)
                if "crossclip" not in extras:
                    continue
                pair, mask = extras["crossclip"]
                S, m = pair.S.numpy(), mask.numpy()
                pos_sum += float(S[m].sum())
                neg_sum += float(S[~m].sum())
                pos_n += int(m.sum())
                neg_n += int((~m).sum())
    if not pos_n or not neg_n:
        # defer to the metric's own error for a single-class mask
        return similarity_margin(np.ones((1, 1)), np.ones((1, 1), dtype=bool))
    mp, mn = pos_sum / pos_n, neg_sum / neg_n
    return mp, mn, mp - mn


def run_ablation(cfg: RunConfig, grid=ABLATION_GRID, on_row: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Train one model per loss combination and score it on the held-out set."""
    train = train_sequences(cfg)
    held = eval_sequences(cfg)
    rows = []
    for name, switches in grid:
        model, _ = train_model(cfg, train, ablation_weights(cfg.loss, switches))
        rep = evaluate_model(model, held, cfg.match)
        _, _, margin = crossclip_margin(model, held, cfg)
        row = {"losses": name, "idf1": rep.idf1, "mota": rep.mota, "id_switches": rep.id_switches,
               "margin": margin}
        rows.append(row)
        if on_row:
            on_row(row)
    return rows


def format_ablation(rows: list[dict]) -> str:
    lines = [f"{'losses':<20}{'idf1':>10}{'mota':>10}{'idsw':>8}{'margin':>10}"]
    for r in rows:
        lines.append(f"{r['losses']:<20}{r['idf1']:>10.4f}{r['mota']:>10.4f}{r['id_switches']:>8d}{r['margin']:>10.4f}")
    return "\n".join(lines)

