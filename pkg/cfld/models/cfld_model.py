"""
The CFLD model container and its frozen/trainable parameter partition.

Parameter names are dotted attribute paths under the top-level components:
`codec`, `source_encoder` (H_S), `prd` (H_D), `appearance` (H_A), `pose_adapter` (H_P),
`unet` (H_N) and `null`. Runs with `prompt_mode` other than `prd` build `prompt_proj` in place
of `prd`; runs with `use_hga=false` build no `appearance`.
"""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from cfld.common.checkpoint import Checkpoint, check_partition, load_checkpoint, save_checkpoint
from cfld.common.config import CfldConfig, config_from_dict
from cfld.common.errors import CheckpointError, PartitionError, ShapeError
from cfld.common.services import logger
from cfld.models.codec import LatentCodec
from cfld.models.conditioning import (
    DROPPED,
    EncoderPrompt,
    NullEmbeddings,
    PerceptionRefinedDecoder,
    PoseAdapter,
    SourceEncoder,
    pose_adapter_forward,
)
from cfld.models.denoiser import HybridAppearance, UNetDenoiser
from cfld.numkit.nn import Module, Parameter
from cfld.numkit.optim import Adam
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor, as_tensor

UP_KV = re.compile(r"^unet\.up_blocks\.\d+\.layers\.\d+\.transformer\.layer\.cross_attn\.to_[kv]\.weight$")
UP_QKV = re.compile(r"^unet\.up_blocks\.\d+\.layers\.\d+\.transformer\.layer\.cross_attn\.to_[qkv]\.weight$")
CONDITIONING_PREFIXES = ("source_encoder.", "prd.", "prompt_proj.", "appearance.", "pose_adapter.", "null.")


def up_attention_rule(config: CfldConfig | None) -> re.Pattern:
    return UP_QKV if config is not None and config.train_query else UP_KV


# trainable-name predicate per training stage
STAGES = {
    "codec": lambda name, config: name.startswith("codec."),
    "backbone": lambda name, config: name.startswith("unet."),
    "cfld": lambda name, config: name.startswith(CONDITIONING_PREFIXES) or bool(up_attention_rule(config).match(name)),
}


@dataclass(frozen=True)
class ParamPartition:
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]

    def to_dict(self) -> dict[str, list[str]]:
        return {"trainable": list(self.trainable), "frozen": list(self.frozen)}

    def validate(self, names: Sequence[str]) -> None:
        overlap = set(self.trainable) & set(self.frozen)
        if overlap:
            raise PartitionError(f"{len(overlap)} parameters are both frozen and trainable, e.g. {sorted(overlap)[:3]}")
        covered = set(self.trainable) | set(self.frozen)
        missing = sorted(set(names) - covered)
        if missing:
            raise PartitionError(f"{len(missing)} parameters are in neither set, e.g. {missing[:3]}")
        unknown = sorted(covered - set(names))
        if unknown:
            raise PartitionError(f"Partition names unknown parameters, e.g. {unknown[:3]}")


def make_partition(names: Sequence[str], stage: str = "cfld", config: CfldConfig | None = None) -> ParamPartition:
    """Split `names` for `stage`; `config.train_query` widens the cfld stage to W_q."""
    if stage not in STAGES:
        raise PartitionError(f"Unknown stage: {stage}. Available stages: {list(STAGES)}")
    is_trainable = STAGES[stage]
    return ParamPartition(
        trainable=tuple(name for name in names if is_trainable(name, config)),
        frozen=tuple(name for name in names if not is_trainable(name, config)),
    )


@dataclass
class ConditioningBundle:
    prompt: Tensor  # [B, Q, D]
    biases: list[Tensor] | None  # per HGA scale, [B, N_l, width_l]
    pose: list[Tensor]  # per down block


def _keep_factor(keep: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(keep, dtype=np.float32).reshape((-1,) + (1,) * (ndim - 1))


class CfldModel(Module):
    def __init__(self, config: CfldConfig, seed: int | None = None):
        seed = config.seed if seed is None else seed
        rng = Rng(seed)
        self.config = config
        self.seed = seed
        self.codec = LatentCodec(config, rng.substream(1))
        self.source_encoder = SourceEncoder(config, rng.substream(2))
        prd = config.prompt_mode == "prd"
        self.prd = PerceptionRefinedDecoder(config, rng.substream(3)) if prd else None
        self.prompt_proj = None if prd else EncoderPrompt(config, rng.substream(3))
        self.appearance = HybridAppearance(config, rng.substream(4)) if config.use_hga else None
        self.pose_adapter = PoseAdapter(config, rng.substream(5))
        self.unet = UNetDenoiser(config, rng.substream(6))
        self.null = NullEmbeddings(config, rng.substream(7))
        self.stage = "cfld"
        self.partition = self.set_stage("cfld")

    def set_stage(self, stage: str) -> ParamPartition:
        """Freeze everything outside the stage's trainable set."""
        names = [name for name, _ in self.named_parameters()]
        partition = make_partition(names, stage, self.config)
        partition.validate(names)
        trainable = set(partition.trainable)
        for name, parameter in self.named_parameters():
            parameter.requires_grad = name in trainable
        self.stage = stage
        self.partition = partition
        return partition

    def null_prompt(self) -> Parameter:
        return self.null.null_prompt()

    def source_conditions(self, x_s) -> tuple[Tensor, list[Tensor] | None]:
        """Coarse prompt [B, tokens, D] and fine appearance biases (None without HGA) for source images."""
        features = self.source_encoder(x_s)
        prompt = self.prd(features[-1]) if self.prd is not None else self.prompt_proj(features)
        return prompt, (self.appearance(features) if self.appearance is not None else None)

    def conditions(
        self,
        x_s,
        x_p,
        keep_source: np.ndarray | None = None,
        keep_pose: np.ndarray | None = None,
        batch: int | None = None,
        source: tuple[Tensor, list[Tensor]] | None = None,
    ) -> ConditioningBundle:
        """Bundle for (x_s or None, x_p or DROPPED).

        Per-item keep flags blend between the real condition and its dropped form: a dropped
        source uses the null prompt and no appearance bias, a dropped pose a zero pyramid.
        `source` reuses an earlier `source_conditions(x_s)` result.
        """
        if x_s is None and source is None:
            if batch is None:
                batch = as_tensor(x_p).shape[0] if x_p is not DROPPED else None
            if batch is None:
                raise ShapeError("conditions() needs a batch size when both conditions are dropped")
            prompt, biases = self.null.expanded(batch), None
        else:
            prompt, biases = source if source is not None else self.source_conditions(x_s)
            batch = prompt.shape[0]
            if keep_source is not None:
                k = _keep_factor(keep_source, 3)
                prompt = prompt * k + self.null.expanded(batch) * (1.0 - k)
                if biases is not None:
                    biases = [bias * k for bias in biases]
        pose = pose_adapter_forward(self.pose_adapter, x_p, batch)
        if keep_pose is not None and x_p is not DROPPED:
            pose = [level * _keep_factor(keep_pose, 4) for level in pose]
        return ConditioningBundle(prompt=prompt, biases=biases, pose=pose)

    def epsilon(self, z_t, t, bundle: ConditioningBundle) -> Tensor:
        return self.unet(z_t, t, bundle.prompt, bundle.pose, bundle.biases)


def trainable_parameters(model: CfldModel, partition: ParamPartition | None = None) -> dict[str, Parameter]:
    """Named trainable set of `model` under `partition` (default: the model's own)."""
    partition = partition or model.partition
    parameters = model.parameters()
    partition.validate(list(parameters))
    selected = {name: parameters[name] for name in partition.trainable}

    backbone = {name: p for name, p in parameters.items() if name.startswith("unet.")}
    backbone_total = sum(p.size for p in backbone.values())
    backbone_trainable = sum(p.size for name, p in selected.items() if name.startswith("unet."))
    fraction = backbone_trainable / backbone_total if backbone_total else 0.0
    logger().info(
        f"Trainable parameters: {sum(p.size for p in selected.values()):,} in {len(selected)} tensors; "
        f"backbone {backbone_trainable:,} of {backbone_total:,} ({fraction:.2%})"
    )
    return selected


def backbone_trainable_fraction(model: CfldModel) -> float:
    parameters = model.parameters()
    total = sum(p.size for name, p in parameters.items() if name.startswith("unet."))
    trainable = sum(parameters[name].size for name in model.partition.trainable if name.startswith("unet."))
    return trainable / total


def save_model(
    path: str | Path,
    model: CfldModel,
    step: int = 0,
    optimizer: Adam | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    tensors = {f"model.{name}": array for name, array in model.state_dict().items()}
    metadata = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "stage": model.stage,
        "step": step,
        "partition": model.partition.to_dict(),
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        metadata["adam_t"] = state.pop("t")
        tensors.update({f"adam.{name}": array for name, array in state.items()})
    metadata.update(extra or {})
    return save_checkpoint(path, Checkpoint(tensors=tensors, metadata=metadata))


def load_model(path: str | Path, stage: str | None = None) -> tuple[CfldModel, Checkpoint]:
    """Rebuild the model recorded in a checkpoint; `stage` re-partitions after loading."""
    checkpoint = load_checkpoint(path)
    try:
        config = config_from_dict(checkpoint.metadata["config"])
        recorded_stage = checkpoint.metadata["stage"]
    except KeyError as err:
        raise CheckpointError(f"Checkpoint metadata lacks {err}") from err
    model = CfldModel(config, checkpoint.metadata.get("seed", config.seed))
    model.set_stage(recorded_stage)
    check_partition(checkpoint, model.partition.to_dict())
    try:
        model.load_state_dict(checkpoint.group("model"))
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"Checkpoint does not match the model: {err}") from err
    if stage is not None and stage != recorded_stage:
        model.set_stage(stage)
    return model, checkpoint


def restore_optimizer(optimizer: Adam, checkpoint: Checkpoint) -> None:
    state: dict[str, Any] = {"t": checkpoint.metadata.get("adam_t", 0)}
    state.update(checkpoint.group("adam"))
    try:
        optimizer.load_state_dict(state)
    except KeyError as err:
        raise CheckpointError(f"Checkpoint lacks optimiser state for {err}") from err
