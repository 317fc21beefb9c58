"""
神经网络核心模块 - 全连接网络、精确反向传播、Adam优化器与Polyak目标网络平均

网络、梯度与Adam状态均为不可变值：每次更新返回新对象，便于把参数快照交给rollout worker。
"""
import os
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from config import NN_CONFIG
from errors import ConfigurationError, NumericError, ShapeError


ACTIVATION_CODES = {"relu": 0, "tanh": 1, "linear": 2}
ACTIVATION_TAGS = {code: tag for tag, code in ACTIVATION_CODES.items()}

NETWORK_MAGIC = b"CGMN"
ADAM_MAGIC = b"CGMA"


@dataclass(frozen=True)
class Layer:
    """单层：weight形状(out, in)，bias形状(out,)"""
    weight: np.ndarray
    bias: np.ndarray
    activation: str


@dataclass(frozen=True)
class Network:
    """全连接前馈网络"""
    layers: Tuple[Layer, ...]

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.layers[0].weight.shape[1],) + tuple(l.weight.shape[0] for l in self.layers)

    @property
    def activations(self) -> Tuple[str, ...]:
        return tuple(l.activation for l in self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def parameters(self) -> List[np.ndarray]:
        """参数列表，顺序为 W0, b0, W1, b1, ..."""
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Network":
        """用新参数构造同结构网络"""
        if len(params) != 2 * len(self.layers):
            raise ShapeError(f"参数个数不匹配: {len(params)} != {2 * len(self.layers)}")
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"第{i}层参数形状不匹配")
            layers.append(Layer(weight=w, bias=b, activation=layer.activation))
        return Network(layers=tuple(layers))

    def same_architecture(self, other: "Network") -> bool:
        return self.layer_sizes == other.layer_sizes and self.activations == other.activations

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


@dataclass(frozen=True)
class Gradients:
    """与Network参数同形的梯度，input_grad为对输入的梯度"""
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    input_grad: Optional[np.ndarray] = None

    def parameters(self) -> List[np.ndarray]:
        grads = []
        for w, b in zip(self.weights, self.biases):
            grads.extend([w, b])
        return grads


@dataclass(frozen=True)
class AdamState:
    """Adam一阶/二阶矩，按 Network.parameters() 顺序排列"""
    m: Tuple[np.ndarray, ...]
    v: Tuple[np.ndarray, ...]
    step: int = 0
    beta1: float = NN_CONFIG["adam_beta1"]
    beta2: float = NN_CONFIG["adam_beta2"]
    eps: float = NN_CONFIG["adam_eps"]


class ForwardTrace(NamedTuple):
    """前向传播中间量：每层输入、预激活、激活输出"""
    inputs: List[np.ndarray]
    preactivations: List[np.ndarray]
    activations: List[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def init_network(layer_sizes: Sequence[int], activations: Sequence[str], seed: int) -> Network:
    """
    初始化网络，每层权重与偏置均匀采样于 ±1/√fan_in

    Args:
        layer_sizes: 各层宽度，至少2个
        activations: 每层激活函数标签（relu/tanh/linear），长度 = 层数-1
        seed: 随机种子，同种子得到逐位相同的网络

    Returns:
        Network: 新网络
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ConfigurationError(f"网络至少需要2个层尺寸，收到: {sizes}")
    if any(int(s) != s or s <= 0 for s in sizes):
        raise ConfigurationError(f"层尺寸必须为正整数: {sizes}")
    if len(activations) != len(sizes) - 1:
        raise ConfigurationError(f"激活函数个数应为{len(sizes) - 1}，收到{len(activations)}")
    for tag in activations:
        if tag not in ACTIVATION_CODES:
            raise ConfigurationError(f"未知激活函数: {tag}")

    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, tag in zip(sizes[:-1], sizes[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(int(fan_out), int(fan_in)))
        bias = rng.uniform(-bound, bound, size=int(fan_out))
        layers.append(Layer(weight=weight, bias=bias, activation=tag))
    return Network(layers=tuple(layers))


def _activate(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, tag: str) -> np.ndarray:
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _check_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise ShapeError(f"输入维度{x.shape}与网络输入维度{net.input_dim}不匹配")
    return x


def forward_trace(net: Network, x) -> ForwardTrace:
    """前向传播并保留中间量；x可以是单个向量或按行堆叠的样本"""
    a = _check_input(net, x)
    inputs, pre, acts = [], [], []
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        a = _activate(z, layer.activation)
        pre.append(z)
        acts.append(a)
    return ForwardTrace(inputs=inputs, preactivations=pre, activations=acts)


def forward(net: Network, x) -> np.ndarray:
    """前向传播，返回最后一层输出（纯函数）"""
    return forward_trace(net, x).output


def backward(net: Network, x, upstream_grad, trace: ForwardTrace = None) -> Gradients:
    """
    反向传播，计算 (upstream_grad · output) 对参数与输入的精确梯度

    对堆叠样本，参数梯度为逐样本梯度之和，input_grad保留逐样本的行。

    Args:
        net: 网络
        x: 输入向量或按行堆叠的输入
        upstream_grad: 与输出同形的上游梯度
        trace: 可选，复用已有的前向中间量

    Returns:
        Gradients: 参数梯度与输入梯度
    """
    if trace is None:
        trace = forward_trace(net, x)
    delta = np.asarray(upstream_grad, dtype=np.float64)
    if delta.shape != trace.output.shape:
        raise ShapeError(f"上游梯度形状{delta.shape}与输出形状{trace.output.shape}不匹配")

    weight_grads, bias_grads = [], []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = delta * _activation_grad(trace.preactivations[i], trace.activations[i], layer.activation)
        a_in = trace.inputs[i]
        if a_in.ndim == 1:
            weight_grads.append(np.outer(dz, a_in))
            bias_grads.append(dz.copy())
        else:
            weight_grads.append(dz.T @ a_in)
            bias_grads.append(dz.sum(axis=0))
        delta = dz @ layer.weight

    return Gradients(
        weights=tuple(reversed(weight_grads)),
        biases=tuple(reversed(bias_grads)),
        input_grad=delta,
    )


def init_adam(net: Network, beta1: float = None, beta2: float = None, eps: float = None) -> AdamState:
    """创建与网络同形的零矩Adam状态"""
    zeros = tuple(np.zeros_like(p) for p in net.parameters())
    return AdamState(
        m=zeros,
        v=tuple(np.zeros_like(p) for p in net.parameters()),
        step=0,
        beta1=NN_CONFIG["adam_beta1"] if beta1 is None else beta1,
        beta2=NN_CONFIG["adam_beta2"] if beta2 is None else beta2,
        eps=NN_CONFIG["adam_eps"] if eps is None else eps,
    )


def adam_step(net: Network, grads: Gradients, state: AdamState, lr: float) -> Tuple[Network, AdamState]:
    """
    带偏差修正的标准Adam下降一步

    Returns:
        Tuple[Network, AdamState]: 更新后的网络与状态（step+1）
    """
    if not lr > 0:
        raise ConfigurationError(f"学习率必须为正: {lr}")
    params = net.parameters()
    grad_list = grads.parameters()
    if len(grad_list) != len(params) or len(state.m) != len(params):
        raise ShapeError("梯度/Adam状态与网络参数个数不一致")
    for p, g, m in zip(params, grad_list, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"梯度形状{g.shape}与参数形状{p.shape}不一致")

    bad = [i for i, g in enumerate(grad_list) if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError("梯度包含非有限值", diagnostics={"parameter_indices": bad, "step": state.step})

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grad_list, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)

    new_net = net.with_parameters(new_params)
    if not new_net.is_finite():
        raise NumericError("Adam更新后参数出现非有限值", diagnostics={"step": t})
    new_state = AdamState(m=tuple(new_m), v=tuple(new_v), step=t,
                          beta1=b1, beta2=b2, eps=state.eps)
    return new_net, new_state


def polyak_update(target: Network, source: Network, tau: float) -> Network:
    """target' = (1-τ)·target + τ·source，逐元素"""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"τ必须在[0,1]内: {tau}")
    if not target.same_architecture(source):
        raise ShapeError(f"网络结构不一致: {target.layer_sizes} vs {source.layer_sizes}")
    params = [(1.0 - tau) * t + tau * s for t, s in zip(target.parameters(), source.parameters())]
    return target.with_parameters(params)


# ============ 检查点读写 ============

def _write_int64(f, values):
    f.write(np.asarray(values, dtype="<i8").tobytes())


def _read_int64(f, count: int) -> np.ndarray:
    return np.frombuffer(f.read(8 * count), dtype="<i8")


def _read_float64(f, count: int) -> np.ndarray:
    data = f.read(8 * count)
    if len(data) != 8 * count:
        raise ShapeError("检查点文件被截断")
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def save_network(net: Network, path: str):
    """
    按固定二进制布局保存网络：
    magic 'CGMN' | int64 L | L个int64层尺寸 | L-1个int64激活码 | 每层W(行优先)后接b，均为小端float64
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    sizes = net.layer_sizes
    with open(path, "wb") as f:
        f.write(NETWORK_MAGIC)
        _write_int64(f, [len(sizes)])
        _write_int64(f, sizes)
        _write_int64(f, [ACTIVATION_CODES[a] for a in net.activations])
        for p in net.parameters():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    logger.debug(f"网络已保存: {path}, 参数量: {net.n_params}")


def load_network(path: str) -> Network:
    """读取 save_network 写出的网络"""
    with open(path, "rb") as f:
        if f.read(4) != NETWORK_MAGIC:
            raise ShapeError(f"不是网络检查点文件: {path}")
        n = int(_read_int64(f, 1)[0])
        sizes = [int(s) for s in _read_int64(f, n)]
        codes = [int(c) for c in _read_int64(f, n - 1)]
        layers = []
        for fan_in, fan_out, code in zip(sizes[:-1], sizes[1:], codes):
            weight = _read_float64(f, fan_out * fan_in).reshape(fan_out, fan_in)
            bias = _read_float64(f, fan_out)
            layers.append(Layer(weight=weight, bias=bias, activation=ACTIVATION_TAGS[code]))
    return Network(layers=tuple(layers))


def save_adam_state(state: AdamState, net: Network, path: str):
    """magic 'CGMA' | int64 step | float64 β1 β2 ε | int64 L | L个层尺寸 | 全部m | 全部v"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    sizes = net.layer_sizes
    with open(path, "wb") as f:
        f.write(ADAM_MAGIC)
        _write_int64(f, [state.step])
        f.write(np.asarray([state.beta1, state.beta2, state.eps], dtype="<f8").tobytes())
        _write_int64(f, [len(sizes)])
        _write_int64(f, sizes)
        for arr in list(state.m) + list(state.v):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_adam_state(path: str) -> AdamState:
    with open(path, "rb") as f:
        if f.read(4) != ADAM_MAGIC:
            raise ShapeError(f"不是Adam状态文件: {path}")
        step = int(_read_int64(f, 1)[0])
        beta1, beta2, eps = (float(x) for x in _read_float64(f, 3))
        n = int(_read_int64(f, 1)[0])
        sizes = [int(s) for s in _read_int64(f, n)]
        shapes = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes.extend([(fan_out, fan_in), (fan_out,)])
        moments = []
        for _ in range(2):
            moments.append(tuple(_read_float64(f, int(np.prod(s))).reshape(s) for s in shapes))
    return AdamState(m=moments[0], v=moments[1], step=step, beta1=beta1, beta2=beta2, eps=eps)
