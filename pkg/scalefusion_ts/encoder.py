"""
Holds the transformer encoder layer used by the initial embedding and every CTL: multi-head
self-attention with pad masks and a GELU feed-forward block, pre-norm residual ordering
"""
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np

from scalefusion_ts.errors import ConfigError
from scalefusion_ts.numerics import (Parameter, Tensor, concat_rows, gelu, layer_norm, row_slice,
                                     softmax_columns)
from scalefusion_ts.patching import FeatureMap


def uniform_init(name: str, rows: int, cols: int, rng: np.random.Generator) -> Parameter:
    """
    Function to make a weight drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = cols
    """
    bound = 1.0 / math.sqrt(cols)
    return Parameter(name, rng.uniform(-bound, bound, size=(rows, cols)))


def zeros_init(name: str, rows: int, cols: int = 1) -> Parameter:
    return Parameter(name, np.zeros((rows, cols)))


def ones_init(name: str, rows: int, cols: int = 1) -> Parameter:
    return Parameter(name, np.ones((rows, cols)))


def head_dim(dim: int, heads: int) -> int:
    """
    Function to split a model dimension across heads

    :raises ConfigError: if dim is not divisible by heads

    """
    if heads < 1 or dim % heads:
        raise ConfigError(f'model dimension {dim} is not divisible by {heads} heads')

    return dim // heads


def multi_head_attention(query_in: Tensor, key_in: Tensor, q_proj: Tensor, k_proj: Tensor, v_proj: Tensor,
                         out_proj: Tensor, heads: int, key_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Function for multi-head attention in the column layout

    Row block h of each stacked projection is that head's matrix. Per head the scores are
    K_h^T Q_h, normalized per query column with temperature 1/sqrt(d_head), and O_h = V_h A_h.

    :type query_in: Tensor
    :param query_in: Query-side features (d_q x P_q)
    :type key_in: Tensor
    :param key_in: Key/value-side features (d_k x P_k)
    :type q_proj: Tensor
    :param q_proj: Stacked query projections (H*d_head x d_q)
    :type k_proj: Tensor
    :param k_proj: Stacked key projections (H*d_head x d_k)
    :type v_proj: Tensor
    :param v_proj: Stacked value projections (H*d_head x d_k)
    :type out_proj: Tensor
    :param out_proj: Output projection (d_out x H*d_head)
    :type heads: Integer
    :param heads: H
    :type key_mask: numpy.ndarray
    :param key_mask: True for key columns that get no attention

    :rtype: Tensor
    :returns: Attention output (d_out x P_q)

    """
    size = head_dim(q_proj.rows, heads)
    queries, keys, values = q_proj @ query_in, k_proj @ key_in, v_proj @ key_in
    outputs = []
    for index in range(heads):
        start, stop = index * size, (index + 1) * size
        scores = row_slice(keys, start, stop).T @ row_slice(queries, start, stop)
        weights = softmax_columns(scores, temperature=1.0 / math.sqrt(size), mask=key_mask)
        outputs.append(row_slice(values, start, stop) @ weights)

    return out_proj @ (outputs[0] if heads == 1 else concat_rows(outputs))


@dataclass
class EncoderLayerParams:
    """
    Parameters of one encoder layer: stacked per-head Q/K/V projections (H*d_head x d), output
    projection (d x H*d_head), feed-forward (d_ff x d) and (d x d_ff) with biases, and two
    layer-norm gain/bias pairs
    """
    heads: int
    query: Parameter
    key: Parameter
    value: Parameter
    output: Parameter
    ff_in: Parameter
    ff_in_bias: Parameter
    ff_out: Parameter
    ff_out_bias: Parameter
    norm1_gain: Parameter
    norm1_bias: Parameter
    norm2_gain: Parameter
    norm2_bias: Parameter

    @classmethod
    def create(cls, prefix: str, dim: int, heads: int, d_ff: int, rng: np.random.Generator) -> 'EncoderLayerParams':
        """
        Method to initialize a layer

        :type prefix: String
        :param prefix: Name prefix for the parameters
        :type dim: Integer
        :param dim: Model dimension d
        :type heads: Integer
        :param heads: Head count H, must divide d
        :type d_ff: Integer
        :param d_ff: Feed-forward width
        :type rng: numpy.random.Generator
        :param rng: Initialization randomness

        :rtype: EncoderLayerParams
        :returns: Fresh parameters

        :raises ConfigError: if d is not divisible by H

        """
        head_dim(dim, heads)
        return cls(
            heads=heads,
            query=uniform_init(f'{prefix}.attn.query', dim, dim, rng),
            key=uniform_init(f'{prefix}.attn.key', dim, dim, rng),
            value=uniform_init(f'{prefix}.attn.value', dim, dim, rng),
            output=uniform_init(f'{prefix}.attn.output', dim, dim, rng),
            ff_in=uniform_init(f'{prefix}.ff.in', d_ff, dim, rng),
            ff_in_bias=zeros_init(f'{prefix}.ff.in_bias', d_ff),
            ff_out=uniform_init(f'{prefix}.ff.out', dim, d_ff, rng),
            ff_out_bias=zeros_init(f'{prefix}.ff.out_bias', dim),
            norm1_gain=ones_init(f'{prefix}.norm1.gain', dim),
            norm1_bias=zeros_init(f'{prefix}.norm1.bias', dim),
            norm2_gain=ones_init(f'{prefix}.norm2.gain', dim),
            norm2_bias=zeros_init(f'{prefix}.norm2.bias', dim),
        )

    def parameters(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value


def _check_heads(h: FeatureMap, params: EncoderLayerParams) -> None:
    head_dim(h.channels, params.heads)
    if params.query.cols != h.channels:
        raise ConfigError(f'encoder layer built for d={params.query.cols} received {h.channels} channels')


def self_attention(h: FeatureMap, params: EncoderLayerParams, mask: Optional[np.ndarray] = None) -> FeatureMap:
    """
    Function for multi-head self-attention over the patches of a feature map

    :type h: FeatureMap
    :param h: Features (d x P)
    :type params: EncoderLayerParams
    :param params: Layer parameters
    :type mask: numpy.ndarray
    :param mask: True for padded patches, defaults to the map's own mask

    :rtype: FeatureMap
    :returns: Same shape as h; padded patches get zero weight from every query

    :raises ConfigError: if the channel count is not divisible by the head count

    """
    _check_heads(h, params)
    mask = h.mask if mask is None else np.asarray(mask, dtype=bool)
    out = multi_head_attention(h.values, h.values, params.query, params.key, params.value, params.output,
                               params.heads, key_mask=mask)
    return FeatureMap(layer=h.layer, values=out, mask=mask)


def encoder_layer(h: FeatureMap, params: EncoderLayerParams, mask: Optional[np.ndarray] = None) -> FeatureMap:
    """
    Function for one pre-norm encoder layer: x + MHA(LN(x)), then + FFN(LN(.))

    :type h: FeatureMap
    :param h: Features (d x P)
    :type params: EncoderLayerParams
    :param params: Layer parameters
    :type mask: numpy.ndarray
    :param mask: True for padded patches, defaults to the map's own mask

    :rtype: FeatureMap
    :returns: Same shape as h

    """
    mask = h.mask if mask is None else np.asarray(mask, dtype=bool)
    normed = FeatureMap(h.layer, layer_norm(h.values, params.norm1_gain, params.norm1_bias), mask)
    hidden = h.values + self_attention(normed, params, mask).values
    inner = gelu(params.ff_in @ layer_norm(hidden, params.norm2_gain, params.norm2_bias) + params.ff_in_bias)
    return FeatureMap(layer=h.layer, values=hidden + (params.ff_out @ inner + params.ff_out_bias), mask=mask)


def encoder_stack(h: FeatureMap, layers: Sequence[EncoderLayerParams]) -> FeatureMap:
    """
    Function to run encoder layers in order, the TransformerEncoders block
    """
    for params in layers:
        h = encoder_layer(h, params)

    return h


def stack_parameters(layers: Sequence[EncoderLayerParams]) -> List[Parameter]:
    return [param for layer in layers for param in layer.parameters()]
