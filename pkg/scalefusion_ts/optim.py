"""
Holds the AdamW optimizer and the batch gradient accumulation used by pretraining and fine-tuning
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Sequence, Tuple, TypeVar

import numpy as np

from scalefusion_ts.errors import ConfigError
from scalefusion_ts.numerics import Gradients, Parameter

LOGGER = logging.getLogger('scalefusion_ts')

Item = TypeVar('Item')


@dataclass
class SampleResult:
    """
    Metrics and gradients of one sample's forward and backward pass
    """
    metrics: Dict[str, float] = field(default_factory=dict)
    grads: Gradients = field(default_factory=Gradients)


def accumulate(fn: Callable[[Item], SampleResult], items: Sequence[Item],
               workers: int = 1) -> Tuple[Gradients, List[Dict[str, float]]]:
    """
    Function to run fn over a batch and average the gradients

    Each sample runs on its own tape. Results are merged in sample order, so the sum does not
    depend on the worker count.

    :type fn: Callable
    :param fn: Maps one item to its SampleResult
    :type items: Sequence
    :param items: The batch
    :type workers: Integer
    :param workers: Threads to spread the samples over Default: 1

    :rtype: Tuple
    :returns: (mean gradients, per-sample metrics)

    :raises ValueError: if the batch is empty

    """
    if not items:
        raise ValueError('cannot accumulate over an empty batch')

    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
            results = list(pool.map(fn, items))

    else:
        results = [fn(item) for item in items]

    total = Gradients()
    for result in results:
        total = total.merge(result.grads)

    return total.scaled(1.0 / len(items)), [result.metrics for result in results]


@dataclass
class _Moments:
    first: np.ndarray
    second: np.ndarray
    steps: int = 0


class AdamW:
    """
    This class is Adam with decoupled weight decay

    Only parameters present in a step's gradients move; the others, including their weight
    decay, stay bit-identical. Bias correction counts each parameter's own updates.

    :type params: Iterable
    :param params: The parameters this optimizer owns
    :type lr: Float
    :param lr: Step size Default: 1e-4
    :type betas: Tuple
    :param betas: Moment decay rates Default: (0.9, 0.999)
    :type eps: Float
    :param eps: Denominator floor Default: 1e-8
    :type weight_decay: Float
    :param weight_decay: Decoupled decay rate Default: 0.01

    :rtype: None
    :returns: NA init

    :raises ConfigError: if a hyperparameter is out of range

    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01) -> None:
        if not lr > 0:
            raise ConfigError(f'step size must be positive but received {lr}')

        if not all(0.0 <= beta < 1.0 for beta in betas):
            raise ConfigError(f'betas must lie in [0, 1) but received {betas}')

        if weight_decay < 0:
            raise ConfigError(f'weight decay must be >= 0 but received {weight_decay}')

        self.params: Dict[str, Parameter] = {}
        for param in params:
            if param.name in self.params:
                raise ValueError(f'parameter {param.name} was passed twice')

            self.params[param.name] = param

        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: Dict[str, _Moments] = {}
        self.step_count = 0

    def __str__(self):  # pragma: no cover
        return f'<AdamW {len(self.params)} params lr={self.lr}>'

    def step(self, grads: Gradients) -> List[str]:
        """
        Method to apply one update

        :type grads: Gradients
        :param grads: Gradients keyed by parameter name, unknown names are ignored

        :rtype: List
        :returns: Names of the parameters that were updated

        """
        beta1, beta2 = self.betas
        self.step_count += 1
        updated = []
        for name, param in self.params.items():
            grad = grads.get(name)
            if grad is None:
                continue

            moments = self.state.get(name)
            if moments is None:
                moments = self.state[name] = _Moments(np.zeros(param.shape), np.zeros(param.shape))

            moments.steps += 1
            moments.first = beta1 * moments.first + (1.0 - beta1) * grad
            moments.second = beta2 * moments.second + (1.0 - beta2) * grad * grad
            first_hat = moments.first / (1.0 - beta1 ** moments.steps)
            second_hat = moments.second / (1.0 - beta2 ** moments.steps)
            value = param.data * (1.0 - self.lr * self.weight_decay)
            param.assign(value - self.lr * first_hat / (np.sqrt(second_hat) + self.eps))
            updated.append(name)

        LOGGER.debug('AdamW step %d updated %d of %d parameters', self.step_count, len(updated), len(self.params))
        return updated
