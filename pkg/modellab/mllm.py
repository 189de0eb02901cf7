"""The multimodal model: sequence assembly, decoder stack, loss, decoding.

A sample is spliced into one sequence (system tokens, visual tokens, user
tokens) and run through a stack of pre-norm blocks whose attention follows
the configured MaskPolicy. Visual tokens come from the frozen encoder via
the projector; text tokens from the word-embedding table.

Parameters are addressed by dotted names ("layers.0.attn.w_q_text") and
partitioned into groups ("text_qkv", "projector", ...) which the training
stages freeze and unfreeze as a whole.
"""
import dataclasses
import logging
import re
from typing import Any, Sequence

import numpy as np

from modellab import tensor as T
from modellab.attention import AttnConfig
from modellab.blocks import NORM_EPS, BlockParams, init_block, run_block
from modellab.masking import MaskPolicy, TokenLayout, build_mask
from modellab.tensor import Tensor
from modellab.vision import (
    Projector,
    VisionConfig,
    VisionEncoder,
    connect,
    encode_image,
    init_encoder,
    init_projector,
)

logger = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
IGNORE_INDEX = -100

GROUPS: tuple[str, ...] = (
    "embed",
    "text_qkv",
    "visual_qkv",
    "attn_out",
    "mlp",
    "lm_head",
    "projector",
    "encoder",
)

# groups that live inside the language model proper
LLM_GROUPS: frozenset[str] = frozenset(
    {"embed", "text_qkv", "visual_qkv", "attn_out", "mlp", "lm_head"})

# first match wins
_GROUP_PATTERNS: list[tuple[re.Pattern, str]] = [
    (re.compile(r"^encoder\."), "encoder"),
    (re.compile(r"^projector\."), "projector"),
    (re.compile(r"^embed$"), "embed"),
    (re.compile(r"^(lm_head|final_norm)$"), "lm_head"),
    (re.compile(r"^layers\.\d+\.attn\.[wb]_[qkv]_text$"), "text_qkv"),
    (re.compile(r"^layers\.\d+\.attn\.[wb]_[qkv]_vis$"), "visual_qkv"),
    (re.compile(r"^layers\.\d+\.(attn\.w_o|attn_norm)$"), "attn_out"),
    (re.compile(r"^layers\.\d+\.(mlp\.\w+|mlp_norm)$"), "mlp"),
]


def group_of(name: str) -> str:
    """The parameter group a named tensor belongs to.

    :param str name: dotted parameter name
    :raises ValueError: if the name belongs to no group
    """
    for pattern, group in _GROUP_PATTERNS:
        if pattern.match(name):
            return group
    raise ValueError(f"Parameter {name!r} belongs to no group")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture of the language model and its vision side.

    vision is None for a text-only decoder.
    """

    vocab_size: int = 512
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    mlp_hidden: int = 344
    policy: MaskPolicy = MaskPolicy.CAUSAL
    separate_visual_qkv: bool = False
    rope_base: float = 10000.0
    qkv_bias: bool = True
    vision: VisionConfig | None = dataclasses.field(
        default_factory=VisionConfig)

    def __post_init__(self) -> None:
        for field in ("vocab_size", "d_model", "heads", "mlp_hidden"):
            if getattr(self, field) < 1:
                raise ValueError(
                    f"{field} must be positive, got {getattr(self, field)}")
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if self.vocab_size <= EOS_ID:
            raise ValueError(
                f"vocab_size must leave room for the special ids, got "
                f"{self.vocab_size}")
        if self.policy is MaskPolicy.NO_VISUAL_ATTENTION and \
                self.separate_visual_qkv:
            raise ValueError(
                "The no-visual-attention ablation is a baseline mode and "
                "cannot be combined with separate visual QKV")
        # validates head/width divisibility
        self.attn_config()

    @property
    def K(self) -> int:  # pylint: disable=invalid-name
        return self.vision.K if self.vision else 0

    def attn_config(self) -> AttnConfig:
        return AttnConfig(
            d_model=self.d_model,
            heads=self.heads,
            rope_base=self.rope_base,
            separate_visual_qkv=self.separate_visual_qkv,
            qkv_bias=self.qkv_bias,
        )

    def to_dict(self) -> dict[str, Any]:
        """JSON-friendly form, the inverse of from_dict."""
        out = dataclasses.asdict(self)
        out["policy"] = self.policy.value
        if self.vision is not None:
            out["vision"]["taps"] = list(self.vision.taps)
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ModelConfig":
        raw = dict(raw)
        if "policy" in raw:
            raw["policy"] = MaskPolicy.parse(str(raw["policy"]))
        vision = raw.get("vision")
        if isinstance(vision, dict):
            vision = dict(vision)
            if "taps" in vision:
                vision["taps"] = tuple(vision["taps"])
            raw["vision"] = VisionConfig(**vision)
        return cls(**raw)


@dataclasses.dataclass
class MllmModel:
    """All model tensors.

    encoder and projector are None for a text-only model.
    """

    cfg: ModelConfig
    embed: Tensor
    layers: list[BlockParams]
    final_norm: Tensor
    lm_head: Tensor
    encoder: VisionEncoder | None = None
    projector: Projector | None = None

    def named(self) -> dict[str, Tensor]:
        """Every tensor by dotted name, sorted by name."""
        named = {
            "embed": self.embed,
            "final_norm": self.final_norm,
            "lm_head": self.lm_head,
        }
        for idx, block in enumerate(self.layers):
            named.update(
                {f"layers.{idx}.{k}": v for k, v in block.named().items()})
        if self.encoder is not None:
            named.update(
                {f"encoder.{k}": v for k, v in self.encoder.named().items()})
        if self.projector is not None:
            named.update({f"projector.{k}": v
                          for k, v in self.projector.named().items()})
        return dict(sorted(named.items()))

    def groups(self) -> dict[str, dict[str, Tensor]]:
        """Named tensors partitioned by group; every group key is present."""
        groups: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
        for name, value in self.named().items():
            groups[group_of(name)][name] = value
        return groups

    def set_trainable(self, trainable: set[str] | frozenset[str]) -> None:
        """Mark exactly the tensors of the given groups as trainable.

        :raises ValueError: on an unknown group or an attempt to train the
            encoder
        """
        unknown = set(trainable) - set(GROUPS)
        if unknown:
            raise ValueError(f"Unknown parameter groups: {sorted(unknown)}")
        if "encoder" in trainable:
            raise ValueError("The vision encoder is never trainable")

        for group, members in self.groups().items():
            for value in members.values():
                value.requires_grad = group in trainable
                value.zero_grad()

    def add_visual_qkv(self) -> None:
        """Copy-initialise visual QKV in every layer and switch routing on."""
        for block in self.layers:
            if not block.attn.has_visual:
                block.attn.add_visual_copy()
        self.cfg = dataclasses.replace(self.cfg, separate_visual_qkv=True)


def init_model(cfg: ModelConfig, seed: int) -> MllmModel:
    """A freshly initialised model.

    The language model, the encoder and the projector draw from independent
    streams of one seed, so two configs that differ only in taps or QKV
    routing share every tensor they have in common.
    """
    llm_seq, enc_seq, proj_seq = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(llm_seq)
    d_model, std = cfg.d_model, 0.02

    model = MllmModel(
        cfg=cfg,
        embed=Tensor(rng.normal(0.0, std, (cfg.vocab_size, d_model)),
                     requires_grad=True, name="embed"),
        layers=[init_block(cfg.attn_config(), cfg.mlp_hidden, rng, std)
                for _ in range(cfg.layers)],
        final_norm=Tensor(np.ones(d_model), requires_grad=True,
                          name="final_norm"),
        lm_head=Tensor(rng.normal(0.0, std, (d_model, cfg.vocab_size)),
                       requires_grad=True, name="lm_head"),
    )

    if cfg.vision is not None:
        model.encoder = init_encoder(
            cfg.vision, np.random.default_rng(enc_seq))
        model.projector = init_projector(
            cfg.vision.K * cfg.vision.d_model, d_model,
            np.random.default_rng(proj_seq))

    logger.debug(
        "Initialised model with %d tensors", len(model.named()))
    return model


# --------------------------------------------------------------------------
# sequence assembly


@dataclasses.dataclass(frozen=True)
class Sample:
    """One training or evaluation example, as token ids plus an image.

    The user segment is prompt followed by answer; only answer tokens are
    supervised.
    """

    system: tuple[int, ...]
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    image: np.ndarray | None = None


@dataclasses.dataclass
class AssembledBatch:
    """Samples laid out as system, visual, user rows.

    user rows are right-padded with PAD_ID; loss_mask is 1 exactly on answer
    tokens.
    """

    system_ids: np.ndarray
    user_ids: np.ndarray
    images: np.ndarray | None
    layout: TokenLayout
    loss_mask: np.ndarray
    user_lengths: np.ndarray

    @property
    def size(self) -> int:
        return int(self.system_ids.shape[0])

    def token_ids(self) -> np.ndarray:
        """[B, N] ids with PAD_ID on the visual span."""
        visual = np.full((self.size, self.layout.n), PAD_ID, dtype=np.int64)
        return np.concatenate([self.system_ids, visual, self.user_ids], axis=1)


def _ids(values: Sequence[int], vocab: int) -> np.ndarray:
    ids = np.asarray(values, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(
            f"Token id out of range for vocab of {vocab}: {list(values)}")
    return ids


def assemble(samples: Sample | Sequence[Sample], cfg: ModelConfig) \
        -> AssembledBatch:
    """Lay samples out as one (system, visual, user) sequence each.

    Every sample must carry the same number of system tokens and either all
    or none must have an image. User segments are right-padded.

    :param samples: one Sample or a batch of them
    :param ModelConfig cfg: model config
    :returns: the batch
    :rtype: AssembledBatch
    :raises ValueError: on an out-of-range token id or an inconsistent batch
    """
    if isinstance(samples, Sample):
        samples = [samples]
    if not samples:
        raise ValueError("Cannot assemble an empty batch")

    system_lengths = {len(s.system) for s in samples}
    if len(system_lengths) != 1:
        raise ValueError(
            f"Samples disagree on system prompt length: "
            f"{sorted(system_lengths)}")

    with_image = {s.image is not None for s in samples}
    if len(with_image) != 1:
        raise ValueError("Either every sample or no sample has an image")
    has_image = with_image.pop()
    if has_image and cfg.vision is None:
        raise ValueError("The model has no vision encoder")

    users = [_ids(s.prompt + s.answer, cfg.vocab_size) for s in samples]
    systems = [_ids(s.system, cfg.vocab_size) for s in samples]
    width = max(len(u) for u in users)

    m = system_lengths.pop()
    n = cfg.vision.n_tokens if has_image and cfg.vision else 0
    layout = TokenLayout(m, n, width)

    user_ids = np.full((len(samples), width), PAD_ID, dtype=np.int64)
    loss_mask = np.zeros((len(samples), layout.N), dtype=np.float32)
    for row, (sample, user) in enumerate(zip(samples, users)):
        user_ids[row, :len(user)] = user
        start = m + n + len(sample.prompt)
        loss_mask[row, start:start + len(sample.answer)] = 1.0

    images = None
    if has_image:
        images = np.stack(
            [np.asarray(s.image, dtype=np.float32) for s in samples])

    return AssembledBatch(
        system_ids=np.stack(systems).reshape(len(samples), m),
        user_ids=user_ids,
        images=images,
        layout=layout,
        loss_mask=loss_mask,
        user_lengths=np.array([len(u) for u in users]),
    )


def visual_tokens(model: MllmModel, images: np.ndarray) -> Tensor:
    """Encoder taps through the projector, [B, n, d_L]."""
    if model.encoder is None or model.projector is None:
        raise ValueError("The model has no vision encoder")
    return connect(encode_image(images, model.encoder), model.projector)


def embed(
    model: MllmModel,
    batch: AssembledBatch,
    visual: Tensor | None = None,
) -> Tensor:
    """The input sequence x^1, [B, N, d_L].

    :param Tensor visual: precomputed visual tokens, to skip the encoder
    """
    parts = []
    if batch.layout.m:
        parts.append(T.embedding_lookup(model.embed, batch.system_ids))
    if batch.layout.n:
        if visual is None:
            visual = visual_tokens(model, batch.images)
        parts.append(visual)
    if batch.layout.o:
        parts.append(T.embedding_lookup(model.embed, batch.user_ids))
    return parts[0] if len(parts) == 1 else T.concat_rows(parts)


# --------------------------------------------------------------------------
# forward, loss


@dataclasses.dataclass
class ForwardTrace:
    """Hidden states recorded on the way through the decoder stack.

    inputs[l] is what layer l received; after_attn[l] and after_mlp[l] are
    its sublayer outputs.
    """

    inputs: list[Tensor] = dataclasses.field(default_factory=list)
    after_attn: list[Tensor] = dataclasses.field(default_factory=list)
    after_mlp: list[Tensor] = dataclasses.field(default_factory=list)


def decode(
    model: MllmModel,
    x: Tensor,
    layout: TokenLayout,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """Run the decoder stack and the LM head over an embedded sequence."""
    mask = build_mask(layout, model.cfg.policy)
    attn_cfg = model.cfg.attn_config()

    for block in model.layers:
        after_attn, after_mlp = run_block(x, block, mask, attn_cfg, layout)
        if trace is not None:
            trace.inputs.append(x)
            trace.after_attn.append(after_attn)
            trace.after_mlp.append(after_mlp)
        x = after_mlp

    normed = T.rms_norm(x, model.final_norm, NORM_EPS)
    return T.matmul(normed, model.lm_head)


def forward(
    batch: AssembledBatch,
    model: MllmModel,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """Logits for every position, [B, N, vocab].

    :param AssembledBatch batch: assembled with this model's config
    :param MllmModel model: the model
    :param ForwardTrace trace: optional recorder of per-layer states
    """
    return decode(model, embed(model, batch), batch.layout, trace)


def shifted_targets(batch: AssembledBatch) -> np.ndarray:
    """[B, N] next-token targets, IGNORE_INDEX where nothing is supervised.

    Position i predicts token i+1, so it is supervised when token i+1 is an
    answer token.
    """
    ids = batch.token_ids()
    targets = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
    supervised = batch.loss_mask[:, 1:] > 0
    targets[:, :-1] = np.where(supervised, ids[:, 1:], IGNORE_INDEX)
    return targets


def loss(logits: Tensor, batch: AssembledBatch) -> Tensor:
    """Mean next-token cross-entropy over answer tokens.

    :raises ValueError: if the batch supervises nothing
    """
    if logits.shape[:2] != (batch.size, batch.layout.N):
        raise ValueError(
            f"Logits of shape {logits.shape} do not match a batch of "
            f"{batch.size} x {batch.layout.N}")
    return T.cross_entropy_with_ignore_index(
        logits, shifted_targets(batch), IGNORE_INDEX)


# --------------------------------------------------------------------------
# decoding and the output lens


def generate_greedy(
    model: MllmModel,
    prompts: Sample | Sequence[Sample],
    max_new: int,
) -> list[list[int]]:
    """Greedy decoding, one token list per prompt.

    The answers of the prompts are ignored. Each step recomputes the whole
    sequence; a sample stops at EOS_ID (which is kept) or after max_new
    tokens. Ties in the argmax go to the lower id.

    :raises ValueError: if max_new < 1
    """
    if max_new < 1:
        raise ValueError(f"max_new must be >= 1, got {max_new}")
    if isinstance(prompts, Sample):
        prompts = [prompts]

    generated: list[list[int]] = [[] for _ in prompts]
    visual = None

    for _ in range(max_new):
        active = [i for i, out in enumerate(generated)
                  if not out or out[-1] != EOS_ID]
        if not active:
            break

        batch = assemble(
            [dataclasses.replace(prompts[i], answer=(),
                                 prompt=prompts[i].prompt
                                 + tuple(generated[i]))
             for i in active],
            model.cfg)

        if batch.layout.n:
            if visual is None:
                visual = visual_tokens(model, batch.images)
            visual_rows = Tensor(visual.data[active])
        else:
            visual_rows = None

        logits = decode(model, embed(model, batch, visual_rows),
                        batch.layout).data
        start = batch.layout.m + batch.layout.n
        for row, idx in enumerate(active):
            last = start + int(batch.user_lengths[row]) - 1
            generated[idx].append(int(np.argmax(logits[row, last])))

    return generated


def top_k(scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    """The k best (id, score) pairs, score descending, lower id on ties.

    :raises ValueError: if k is not in 1..len(scores)
    """
    if not 1 <= k <= scores.shape[-1]:
        raise ValueError(
            f"k must lie in 1..{scores.shape[-1]}, got {k}")
    order = np.lexsort((np.arange(scores.shape[-1]), -scores))[:k]
    return [(int(i), float(scores[i])) for i in order]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax of raw logits, no autodiff."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def logit_lens_output(
    model: MllmModel,
    batch: AssembledBatch,
    k: int,
) -> list[list[list[tuple[int, float]]]]:
    """Top-k next-word probabilities at every visual position.

    :returns: indexed [sample][visual token] -> k (word id, probability)
        pairs
    :raises ValueError: if the batch has no visual tokens or k is out of
        range
    """
    if batch.layout.n < 1:
        raise ValueError("The output lens needs at least one visual token")
    if not 1 <= k <= model.cfg.vocab_size:
        raise ValueError(
            f"k must lie in 1..{model.cfg.vocab_size}, got {k}")

    start, stop = batch.layout.visual_span
    probs = softmax(forward(batch, model).data[:, start:stop])
    return [[top_k(token, k) for token in sample] for sample in probs]
