"""
Holds the ScaleFusion encoder: the initial patch embedding, the stack of Conv-like Transformer
Layers (CTLs), cross-scale attention fusion, the per-layer reconstruction decoders, the
pretraining loss and the pretraining loop
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from scalefusion_ts.common import RecordWriter, derive_rng
from scalefusion_ts.encoder import (EncoderLayerParams, encoder_stack, head_dim, multi_head_attention,
                                    ones_init, stack_parameters, uniform_init, zeros_init)
from scalefusion_ts.errors import ConfigError, DataError, LengthError, ShapeError, UnsupportedLengthError
from scalefusion_ts.numerics import (Parameter, Tape, Tensor, column_slice, instance_norm, layer_norm, mul,
                                     sum_squares)
from scalefusion_ts.optim import AdamW, SampleResult, accumulate
from scalefusion_ts.patching import (FeatureMap, PatchConfig, PyramidSchedule, pad_patch_matrix, patch_series,
                                     repatch, schedule)

LOGGER = logging.getLogger('scalefusion_ts')

POSITION_INIT_BOUND = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture of the encoder

    :type patch: PatchConfig
    :param patch: Patch geometry (l_p, s_p, l_rp, d^0, T_max)
    :type heads: Integer
    :param heads: Attention heads H for every encoder and cross-scale block Default: 8
    :type d_ff: Integer
    :param d_ff: Feed-forward width Default: 2048
    :type encoder_depth: Integer
    :param encoder_depth: Encoder layers per TransformerEncoders block Default: 1
    :type alpha: Float
    :param alpha: Weight of the feature-norm term in the pretraining loss Default: 1e-4

    :raises ConfigError: if d^0 is not divisible by H or a count or alpha is out of range

    """
    patch: PatchConfig = field(default_factory=PatchConfig)
    heads: int = 8
    d_ff: int = 2048
    encoder_depth: int = 1
    alpha: float = 1e-4

    def __post_init__(self):
        if not isinstance(self.patch, PatchConfig):
            raise TypeError(f'param patch must be of type PatchConfig but received {type(self.patch)}')

        for name in ('heads', 'd_ff', 'encoder_depth'):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f'model.{name} must be a positive integer but received {value!r}')

        if self.patch.base_dim % self.heads:
            raise ConfigError(f'model.base_dim {self.patch.base_dim} is not divisible by model.heads {self.heads}')

        check_alpha(self.alpha)

    def as_dict(self) -> dict:
        return {
            'patch_len': self.patch.patch_len,
            'stride': self.patch.stride,
            'repatch_len': self.patch.repatch_len,
            'base_dim': self.patch.base_dim,
            'max_len': self.patch.max_len,
            'heads': self.heads,
            'd_ff': self.d_ff,
            'encoder_depth': self.encoder_depth,
            'alpha': float(self.alpha),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelConfig':
        data = dict(data)
        patch = PatchConfig(**{key: data.pop(key) for key in ('patch_len', 'stride', 'repatch_len', 'base_dim',
                                                               'max_len') if key in data})
        return cls(patch=patch, **data)


def check_alpha(alpha: float) -> None:
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) or not math.isfinite(alpha) or alpha < 0:
        raise ConfigError(f'model.alpha must be a finite number >= 0 but received {alpha!r}')


@dataclass
class CrossScaleParams:
    """
    Cross-scale attention of one layer: stacked per-head W^Q (d^l x d^l), W^K and W^V
    (d^l x d^(l-1)), W^O (d^l x d^l) and the post-fusion layer norm; d_csa = d^l / H
    """
    heads: int
    query: Parameter
    key: Parameter
    value: Parameter
    output: Parameter
    norm_gain: Parameter
    norm_bias: Parameter

    @classmethod
    def create(cls, prefix: str, dim: int, prev_dim: int, heads: int, rng: np.random.Generator) -> 'CrossScaleParams':
        head_dim(dim, heads)
        return cls(heads=heads,
                   query=uniform_init(f'{prefix}.query', dim, dim, rng),
                   key=uniform_init(f'{prefix}.key', dim, prev_dim, rng),
                   value=uniform_init(f'{prefix}.value', dim, prev_dim, rng),
                   output=uniform_init(f'{prefix}.output', dim, dim, rng),
                   norm_gain=ones_init(f'{prefix}.norm.gain', dim),
                   norm_bias=zeros_init(f'{prefix}.norm.bias', dim))

    def parameters(self) -> Iterator[Parameter]:
        yield from (self.query, self.key, self.value, self.output, self.norm_gain, self.norm_bias)


@dataclass
class ReconParams:
    """
    Reconstruction decoder of one layer: W^recon ((l_rp)^l l_p x d^l) and b^recon
    """
    weight: Parameter
    bias: Parameter

    @classmethod
    def create(cls, prefix: str, out_len: int, dim: int, rng: np.random.Generator) -> 'ReconParams':
        return cls(weight=uniform_init(f'{prefix}.weight', out_len, dim, rng),
                   bias=zeros_init(f'{prefix}.bias', out_len))

    def parameters(self) -> Iterator[Parameter]:
        yield from (self.weight, self.bias)


@dataclass
class LayerParams:
    """
    Everything attached to CTL layer l: the re-patch projection (d^l x d^l), its encoders and
    trailing layer norm, the cross-scale block and the reconstruction decoder
    """
    layer: int
    repatch: Parameter
    encoders: List[EncoderLayerParams]
    norm_gain: Parameter
    norm_bias: Parameter
    cross: CrossScaleParams
    recon: ReconParams

    def parameters(self, include_recon: bool = True) -> Iterator[Parameter]:
        yield self.repatch
        yield from stack_parameters(self.encoders)
        yield from (self.norm_gain, self.norm_bias)
        yield from self.cross.parameters()
        if include_recon:
            yield from self.recon.parameters()


class ModelParams:
    """
    This class holds every learnable matrix of the encoder, plus the task heads once a head bank
    is attached

    :type config: ModelConfig
    :param config: The architecture
    :type rng: numpy.random.Generator
    :param rng: Initialization randomness

    :rtype: None
    :returns: NA init

    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        if not isinstance(config, ModelConfig):
            raise TypeError(f'param config must be of type ModelConfig but received {type(config)}')

        self.config = config
        patch = config.patch
        dim = patch.base_dim
        self.embed = uniform_init('embed.weight', dim, patch.patch_len, rng)
        self.embed_bias = zeros_init('embed.bias', dim)
        self.position = Parameter('embed.position',
                                  rng.uniform(-POSITION_INIT_BOUND, POSITION_INIT_BOUND, size=(dim, patch.max_patches)))
        self.embed_norm_gain = ones_init('embed.norm.gain', dim)
        self.embed_norm_bias = zeros_init('embed.norm.bias', dim)
        self.encoders = [EncoderLayerParams.create(f'embed.encoders.{depth}', dim, config.heads, config.d_ff, rng)
                         for depth in range(config.encoder_depth)]
        self.layers: List[LayerParams] = []
        for layer in range(1, patch.max_layers + 1):
            prev_dim, dim = dim, patch.channel_dim(layer)
            prefix = f'layers.{layer}'
            self.layers.append(LayerParams(
                layer=layer,
                repatch=uniform_init(f'{prefix}.repatch', dim, dim, rng),
                encoders=[EncoderLayerParams.create(f'{prefix}.encoders.{depth}', dim, config.heads, config.d_ff, rng)
                          for depth in range(config.encoder_depth)],
                norm_gain=ones_init(f'{prefix}.norm.gain', dim),
                norm_bias=zeros_init(f'{prefix}.norm.bias', dim),
                cross=CrossScaleParams.create(f'{prefix}.cross', dim, prev_dim, config.heads, rng),
                recon=ReconParams.create(f'{prefix}.recon', patch.repatch_len ** layer * patch.patch_len, dim, rng),
            ))

        # filled by heads.HeadBank.attach
        self.heads = None

    def __str__(self):  # pragma: no cover
        return f'<ModelParams L_max={len(self.layers)} d^0={self.config.patch.base_dim}>'

    def layer(self, index: int) -> LayerParams:
        if not 1 <= index <= len(self.layers):
            raise LengthError(f'layer {index} is outside [1, {len(self.layers)}]')

        return self.layers[index - 1]

    @property
    def recons(self) -> List[ReconParams]:
        return [layer.recon for layer in self.layers]

    def backbone_parameters(self, include_recon: bool = True) -> List[Parameter]:
        """
        Method to list the encoder parameters in a fixed order

        :type include_recon: Boolean
        :param include_recon: Include the reconstruction decoders Default: True

        :rtype: List
        :returns: The parameters

        """
        params = [self.embed, self.embed_bias, self.position, self.embed_norm_gain, self.embed_norm_bias]
        params.extend(stack_parameters(self.encoders))
        for layer in self.layers:
            params.extend(layer.parameters(include_recon=include_recon))

        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        """
        Method to map every parameter name, heads included, to its parameter

        :rtype: Dict
        :returns: name -> Parameter, in construction order

        """
        params = self.backbone_parameters()
        if self.heads is not None:
            params.extend(self.heads.parameters())

        return {param.name: param for param in params}

    def snapshot(self, names: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
        params = self.named_parameters()
        return {name: params[name].numpy() for name in (names if names is not None else params)}

    def restore(self, values: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        for name, value in values.items():
            params[name].assign(value)


@dataclass
class Encoding:
    """
    One forward pass: the schedule, the unpadded patch matrix, H_0 and the fused maps H_1..H_L
    """
    schedule: PyramidSchedule
    patches: np.ndarray
    initial: FeatureMap
    maps: List[FeatureMap]

    @property
    def final(self) -> FeatureMap:
        if not self.maps:
            raise UnsupportedLengthError(f'length {self.schedule.input_len} activates no CTL layer')

        return self.maps[-1]


def embed_patches(patches: np.ndarray, params: ModelParams) -> Tensor:
    """
    Function for the pre-norm embedding W_emb X_patch + b_emb + positional embedding

    :raises ShapeError: if the patch length or count does not fit the model

    """
    patch = params.config.patch
    if patches.ndim != 2 or patches.shape[0] != patch.patch_len:
        raise ShapeError(f'patch matrix must have {patch.patch_len} rows but the shape is {patches.shape}')

    if not 1 <= patches.shape[1] <= patch.max_patches:
        raise ShapeError(f'{patches.shape[1]} patches is outside [1, {patch.max_patches}]')

    position = column_slice(params.position, 0, patches.shape[1])
    return params.embed @ Tensor(patches) + params.embed_bias + position


def embed_initial(patches: np.ndarray, params: ModelParams) -> FeatureMap:
    """
    Function for the initial embedding: linear embed, positional embedding, LayerNorm, encoders

    :type patches: numpy.ndarray
    :param patches: Patch matrix (l_p x P^0) from patch_series
    :type params: ModelParams
    :param params: Model parameters

    :rtype: FeatureMap
    :returns: H_0 (d^0 x P^0)

    """
    normed = layer_norm(embed_patches(patches, params), params.embed_norm_gain, params.embed_norm_bias)
    return encoder_stack(FeatureMap(layer=0, values=normed), params.encoders)


def ctl_forward(h_prev: FeatureMap, params: ModelParams, sched: PyramidSchedule) -> FeatureMap:
    """
    Function for one Conv-like Transformer Layer: re-patch, project (d^l x d^l), InstanceNorm,
    encoders, LayerNorm

    :type h_prev: FeatureMap
    :param h_prev: H_(l-1)
    :type params: ModelParams
    :param params: Model parameters
    :type sched: PyramidSchedule
    :param sched: Schedule of the input

    :rtype: FeatureMap
    :returns: H*_l (d^l x P^l)

    :raises LengthError: if layer l is not activated for this input
    :raises ShapeError: if the result does not match the schedule

    """
    layer = h_prev.layer + 1
    if layer > sched.activated_layers:
        raise LengthError(f'layer {layer} is beyond the {sched.activated_layers} activated layers')

    layer_params = params.layer(layer)
    grouped = repatch(h_prev, params.config.patch.repatch_len)
    projected = instance_norm(layer_params.repatch @ grouped.values)
    encoded = encoder_stack(FeatureMap(layer, projected, grouped.mask), layer_params.encoders)
    out = FeatureMap(layer, layer_norm(encoded.values, layer_params.norm_gain, layer_params.norm_bias), grouped.mask)
    expected = sched.layer(layer)
    if out.values.shape != (expected.channel_dim, expected.patch_count):
        raise ShapeError(f'layer {layer} produced {out.values.shape}, the schedule expects '
                         f'{(expected.channel_dim, expected.patch_count)}')

    return out


def cross_scale_fuse(h_star: FeatureMap, h_prev: FeatureMap, params: CrossScaleParams) -> FeatureMap:
    """
    Function for cross-scale attention: H*_l queries H_(l-1), the heads are projected by W^O,
    added to H*_l and layer-normed

    :type h_star: FeatureMap
    :param h_star: H*_l from ctl_forward
    :type h_prev: FeatureMap
    :param h_prev: H_(l-1), its masked patches are excluded from keys and values
    :type params: CrossScaleParams
    :param params: The layer's cross-scale parameters

    :rtype: FeatureMap
    :returns: H_l

    :raises ValueError: if the layers are not adjacent

    """
    if h_star.layer != h_prev.layer + 1:
        raise ValueError(f'cross-scale fusion needs adjacent layers but received {h_star.layer} and {h_prev.layer}')

    fused = multi_head_attention(h_star.values, h_prev.values, params.query, params.key, params.value,
                                 params.output, params.heads, key_mask=h_prev.mask)
    return FeatureMap(h_star.layer, layer_norm(h_star.values + fused, params.norm_gain, params.norm_bias), h_star.mask)


def encode(x, params: ModelParams) -> Encoding:
    """
    Function to run the whole pyramid on one series

    :type x: array-like
    :param x: Series with l_p <= T <= T_max
    :type params: ModelParams
    :param params: Model parameters

    :rtype: Encoding
    :returns: The schedule, patches and feature maps

    :raises LengthError: if T is out of range

    """
    patch = params.config.patch
    series = np.asarray(x, dtype=np.float64)
    sched = schedule(series.size, patch)
    patches = patch_series(series, patch)
    current = initial = embed_initial(patches, params)
    maps = []
    for layer in range(1, sched.activated_layers + 1):
        h_star = ctl_forward(current, params, sched)
        current = cross_scale_fuse(h_star, current, params.layer(layer).cross)
        maps.append(current)

    return Encoding(schedule=sched, patches=patches, initial=initial, maps=maps)


def forward_pyramid(x, params: ModelParams) -> List[FeatureMap]:
    """
    Function for the fused feature maps H_1..H_L of one series, empty when L = 0
    """
    return encode(x, params).maps


@dataclass
class Reconstruction:
    """
    Predictions (span*l_p x P^l), the flattened segment targets and a 0/1 mask that is zero on
    values from padded patches
    """
    predictions: Tensor
    targets: np.ndarray
    mask: np.ndarray


def _fold(matrix: np.ndarray, group: int) -> np.ndarray:
    rows, cols = matrix.shape
    return np.ascontiguousarray(matrix.T.reshape(cols // group, group * rows).T)


def reconstruct_layer(h: FeatureMap, recon: ReconParams, patches: np.ndarray,
                      real_patches: Optional[int] = None) -> Reconstruction:
    """
    Function to decode every patch of layer l back into the original patches it covers

    :type h: FeatureMap
    :param h: H_l (d^l x P^l)
    :type recon: ReconParams
    :param recon: The layer's decoder
    :type patches: numpy.ndarray
    :param patches: Original patch matrix, unpadded or already zero-padded
    :type real_patches: Integer
    :param real_patches: How many leading columns are real patches Default: all columns

    :rtype: Reconstruction
    :returns: Predictions W h + b and the flattened targets of each segment

    :raises ShapeError: if the decoder, features and patches do not line up

    """
    patch_len = patches.shape[0]
    if recon.weight.rows % patch_len:
        raise ShapeError(f'decoder output {recon.weight.rows} is not a multiple of patch length {patch_len}')

    span = recon.weight.rows // patch_len
    if recon.weight.cols != h.channels:
        raise ShapeError(f'decoder expects {recon.weight.cols} channels but the features have {h.channels}')

    real_patches = patches.shape[1] if real_patches is None else real_patches
    total = span * h.patches
    if patches.shape[1] > total:
        raise ShapeError(f'{patches.shape[1]} patches do not fit {h.patches} segments of {span}')

    padded = pad_patch_matrix(patches, total)
    mask = np.zeros_like(padded)
    mask[:, :real_patches] = 1.0
    predictions = recon.weight @ h.values + recon.bias
    return Reconstruction(predictions=predictions, targets=_fold(padded, span), mask=_fold(mask, span))


@dataclass
class LossTerms:
    """
    L_total = L_recon + alpha * L_indep, each a 1x1 Tensor
    """
    total: Tensor
    recon: Tensor
    indep: Tensor

    def values(self) -> Dict[str, float]:
        return {'L_total': self.total.item(), 'L_recon': self.recon.item(), 'L_indep': self.indep.item()}


def pretrain_loss_terms(maps: Sequence[FeatureMap], recons: Sequence[ReconParams], patches: np.ndarray,
                        alpha: float) -> LossTerms:
    """
    Function for the reconstruction and feature-norm terms over all activated layers

    :type maps: Sequence
    :param maps: H_1..H_L
    :type recons: Sequence
    :param recons: Decoders, recons[i] belongs to maps[i]
    :type patches: numpy.ndarray
    :param patches: Unpadded original patch matrix
    :type alpha: Float
    :param alpha: Weight of L_indep, 0 leaves it out of the total

    :rtype: LossTerms
    :returns: total, recon and indep

    :raises ConfigError: if alpha < 0
    :raises UnsupportedLengthError: if maps is empty

    """
    check_alpha(alpha)
    if not maps:
        raise UnsupportedLengthError('pretraining needs at least one activated layer')

    if len(recons) < len(maps):
        raise ShapeError(f'{len(maps)} feature maps but only {len(recons)} decoders')

    recon_loss = indep_loss = None
    for feature_map, decoder in zip(maps, recons):
        result = reconstruct_layer(feature_map, decoder, patches)
        error = sum_squares(mul(result.predictions - Tensor(result.targets), Tensor(result.mask)))
        norm = sum_squares(feature_map.values)
        recon_loss = error if recon_loss is None else recon_loss + error
        indep_loss = norm if indep_loss is None else indep_loss + norm

    total = recon_loss + alpha * indep_loss if alpha > 0 else recon_loss
    return LossTerms(total=total, recon=recon_loss, indep=indep_loss)


def pretrain_loss(maps: Sequence[FeatureMap], recons: Sequence[ReconParams], patches: np.ndarray,
                  alpha: float) -> Tensor:
    """
    Function for L_total = sum_l sum_p ||x - x_hat||^2 + alpha sum_l sum_p ||h||^2
    """
    return pretrain_loss_terms(maps, recons, patches, alpha).total


@dataclass(frozen=True)
class PretrainConfig:
    """
    Optimization settings of the pretraining loop
    """
    step_size: float = 1e-4
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.01
    workers: int = 1
    max_steps: Optional[int] = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError(f'train.step_size must be positive but received {self.step_size}')

        for name in ('epochs', 'batch_size', 'workers'):
            if getattr(self, name) < 1:
                raise ConfigError(f'train.{name} must be >= 1 but received {getattr(self, name)}')

        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f'train.max_steps must be >= 1 but received {self.max_steps}')

        if self.weight_decay < 0:
            raise ConfigError(f'train.weight_decay must be >= 0 but received {self.weight_decay}')


@dataclass
class PretrainResult:
    """
    Per-epoch records and the per-step mean losses of a pretraining run
    """
    history: List[dict] = field(default_factory=list)
    step_losses: List[Dict[str, float]] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.step_losses)


def pretrain_sample(params: ModelParams, series: np.ndarray) -> SampleResult:
    """
    Function to run forward and backward for one series on its own tape
    """
    with Tape() as tape:
        encoding = encode(series, params)
        terms = pretrain_loss_terms(encoding.maps, params.recons, encoding.patches, params.config.alpha)

    return SampleResult(metrics=terms.values(), grads=tape.gradients(terms.total))


def pretrain(params: ModelParams, series: Sequence[np.ndarray], cfg: PretrainConfig,
             writer: Optional[RecordWriter] = None) -> PretrainResult:
    """
    Function to pretrain the encoder and decoders on L_total with AdamW

    :type params: ModelParams
    :param params: Model parameters, updated in place
    :type series: Sequence
    :param series: Training series, already standardized
    :type cfg: PretrainConfig
    :param cfg: Optimization settings
    :type writer: RecordWriter
    :param writer: Receives one record per epoch

    :rtype: PretrainResult
    :returns: The loss history

    :raises DataError: if series is empty
    :raises UnsupportedLengthError: if a series activates no layer
    :raises NumericError: if a loss becomes non-finite

    """
    if not series:
        raise DataError('pretraining needs at least one series')

    for item in series:
        if schedule(len(item), params.config.patch).activated_layers == 0:
            raise UnsupportedLengthError(f'series of length {len(item)} activates no CTL layer')

    optimizer = AdamW(params.backbone_parameters(), lr=cfg.step_size, weight_decay=cfg.weight_decay)
    shuffle = derive_rng(cfg.seed, 'shuffle')
    result = PretrainResult()
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(series))
        epoch_metrics = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [series[index] for index in order[start:start + cfg.batch_size]]
            grads, metrics = accumulate(lambda item: pretrain_sample(params, item), batch, cfg.workers)
            optimizer.step(grads)
            mean = {key: float(np.mean([row[key] for row in metrics])) for key in metrics[0]}
            result.step_losses.append(mean)
            epoch_metrics.extend(metrics)
            LOGGER.debug('pretrain step %d L_total %.6e', result.steps, mean['L_total'])
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break

        record = {'epoch': epoch, 'split': 'train', 'steps': result.steps}
        record.update({key: float(np.mean([row[key] for row in epoch_metrics])) for key in epoch_metrics[0]})
        result.history.append(writer.write(**record) if writer is not None else record)
        if cfg.max_steps is not None and result.steps >= cfg.max_steps:
            break

    return result
