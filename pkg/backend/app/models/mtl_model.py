"""
Multi-task momentum network and its losses.

A shared stacked LSTM reads each asset's lookback window of features;
its last hidden state feeds a main head (position weight in (-1, 1)) and
one auxiliary head per active volatility target (forecast >= 0). One
network is applied to every asset; the assets meet in the portfolio
return, so the Sharpe loss is computed over a contiguous span of dates.

    total = mu * sharpe_loss(portfolio returns) + lambda * sum_h corr_loss_h
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from numpy.lib.stride_tricks import sliding_window_view

from ..core.errors import MisalignedPanels, ShapeMismatch, TooFewObservations
from ..pipeline.features import FeaturePanel
from ..schemas import TARGET_KINDS, ModelConfig, VolEstimatorKind
from .neural_core import DTYPE, Fnn, StackedLstm, as_tensor, make_generator, mean, sample_std

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-12
SHARPE_CLAMP = 1e6


class MtlModel(nn.Module):
    """Shared LSTM trunk, tanh main head, softplus auxiliary heads."""

    def __init__(self, n_features: int, config: ModelConfig, seed: Optional[int] = None):
        super().__init__()
        self.n_features = n_features
        self.config = config
        self.shared = StackedLstm(n_features, config.lstm_hidden, config.n_lstm_layers, config.lstm_dropout)
        self.main_head = Fnn(
            config.lstm_hidden, config.mlp_hidden, config.n_mlp_layers, config.mlp_dropout, "tanh"
        )
        self.aux_heads = nn.ModuleDict(
            {
                kind.value: Fnn(
                    config.lstm_hidden, config.mlp_hidden, config.n_mlp_layers, config.mlp_dropout, "softplus"
                )
                for kind in config.active_aux_tasks
            }
        )
        self._init_weights(seed)

    def _init_weights(self, seed: Optional[int]) -> None:
        """Deterministic init: trunk, main head, then aux heads in canonical order."""
        generator = make_generator(seed)
        self.shared.reset_parameters(generator)
        self.main_head.reset_parameters(generator)
        for head in self.aux_heads.values():
            head.reset_parameters(generator)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(
        self, windows: torch.Tensor, generator: Optional[torch.Generator] = None
    ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        """
        Args:
            windows: [batch, lookback, features]

        Returns:
            (weights [batch], {kind: forecasts [batch]})
        """
        if windows.dim() != 3 or windows.shape[-1] != self.n_features:
            raise ShapeMismatch(
                f"expected [batch, lookback, {self.n_features}] windows, got {tuple(windows.shape)}"
            )
        hidden = self.shared(windows, generator)
        weights = self.main_head(hidden, generator)
        aux = {kind: head(hidden, generator) for kind, head in self.aux_heads.items()}
        return weights, aux


def forward(
    model: MtlModel, window, training: bool = False, seed: Optional[int] = None
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Run the model on one window [lookback, features] or a batch of windows.

    Dropout is active only with training=True and is driven by `seed`.
    """
    window = as_tensor(window)
    single = window.dim() == 2
    if single:
        window = window.unsqueeze(0)
    if window.dim() != 3 or window.shape[1] != model.config.lookback_len:
        raise ShapeMismatch(
            f"window must span lookback_len={model.config.lookback_len} steps, got {tuple(window.shape)}"
        )
    was_training = model.training
    model.train(training)
    try:
        w, aux = model(window, make_generator(seed))
    finally:
        model.train(was_training)
    if single:
        return w[0], {k: v[0] for k, v in aux.items()}
    return w, aux


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def portfolio_return_net(
    weights,
    asset_returns,
    prev_weights=None,
    sigma_target: float = 0.10,
    tau: float = 0.0003,
    active=None,
) -> torch.Tensor:
    """
    Per-date net portfolio return with turnover costs.

        r_t = sigma_tgt / S_t * sum_{i active} [w_it * r_i,t+1 - tau * |w_it - w_i,t-1|]

    weights and asset_returns are [assets, dates] aligned on the decision
    date (asset_returns[:, t] is the return realized over (t, t+1]).
    Inactive entries hold a zero weight; dates with S_t = 0 return 0.

    Costs are summed over the assets active at t only. An asset that leaves
    S_t is not charged tau * |w_i,t-1| for closing its position, so net
    returns overstate the true net when assets drop out. An asset entering
    S_t pays tau * |w_it| against its zero lagged weight.
    """
    weights = as_tensor(weights)
    asset_returns = as_tensor(asset_returns)
    if weights.dim() != 2 or weights.shape != asset_returns.shape:
        raise MisalignedPanels(
            f"weights {tuple(weights.shape)} and returns {tuple(asset_returns.shape)} must be equal [assets, dates]"
        )
    n_assets = weights.shape[0]
    if active is None:
        active = torch.isfinite(asset_returns)
    else:
        active = torch.as_tensor(active, dtype=torch.bool)
        if active.shape != weights.shape:
            raise MisalignedPanels(f"active mask {tuple(active.shape)} != {tuple(weights.shape)}")
    if prev_weights is None:
        prev_weights = torch.zeros(n_assets, dtype=DTYPE)
    prev_weights = as_tensor(prev_weights)
    if prev_weights.shape != (n_assets,):
        raise MisalignedPanels(f"prev_weights shape {tuple(prev_weights.shape)} != ({n_assets},)")

    w = torch.where(active, weights, torch.zeros_like(weights))
    r = torch.where(active, torch.nan_to_num(asset_returns, nan=0.0), torch.zeros_like(weights))
    lagged = torch.cat([prev_weights.unsqueeze(1), w], dim=1)[:, :-1]
    per_asset = w * r - tau * torch.abs(w - lagged)
    per_asset = torch.where(active, per_asset, torch.zeros_like(per_asset))

    count = active.sum(dim=0).to(DTYPE)
    total = per_asset.sum(dim=0)
    return torch.where(count > 0, sigma_target * total / count.clamp(min=1.0), torch.zeros_like(total))


def sharpe_loss(returns) -> torch.Tensor:
    """-mean / std (sample std, not annualized)."""
    returns = as_tensor(returns).reshape(-1)
    if returns.numel() < 2:
        raise TooFewObservations(f"sharpe_loss needs >= 2 returns, got {returns.numel()}")
    mu = mean(returns)
    sd = sample_std(returns)
    if sd.item() < STD_FLOOR:
        return torch.clamp(-mu / STD_FLOOR, -SHARPE_CLAMP, SHARPE_CLAMP)
    return -mu / sd


def corr_loss(y, y_hat) -> torch.Tensor:
    """
    Negative sample correlation of predictions y with realized vols y_hat.

    Pairs with a missing value are dropped; a zero-variance side yields 0.
    """
    y = as_tensor(y).reshape(-1)
    y_hat = as_tensor(y_hat).reshape(-1)
    if y.shape != y_hat.shape:
        raise ShapeMismatch(f"corr_loss: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    keep = torch.isfinite(y_hat) & torch.isfinite(y.detach())
    y, y_hat = y[keep], y_hat[keep]
    n = y.numel()
    if n < 2:
        raise TooFewObservations(f"corr_loss needs >= 2 paired observations, got {n}")
    dy = y - mean(y)
    dh = y_hat - mean(y_hat)
    sy = torch.sqrt((dy * dy).sum() / (n - 1))
    sh = torch.sqrt((dh * dh).sum() / (n - 1))
    if sy.item() < STD_FLOOR or sh.item() < STD_FLOOR:
        logger.warning("corr_loss: zero-variance series, contribution set to 0")
        return (y * 0.0).sum()
    cov = (dy * dh).sum() / (n - 1)
    return -cov / (sy * sh)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """
    A contiguous span of decision dates across all assets.

    Entries (asset, date) with a fully valid lookback window and a next-day
    return inside the split are `active`; only those run through the model.
    """
    windows: torch.Tensor            # [N, lookback, features]
    asset_index: torch.Tensor        # [N]
    date_index: torch.Tensor         # [N]
    next_returns: torch.Tensor       # [assets, dates]
    active: torch.Tensor             # [assets, dates] bool
    targets: torch.Tensor            # [assets, dates, 5], NaN where absent
    positions: np.ndarray            # calendar positions of the decision dates
    prev_weights: Optional[torch.Tensor] = None
    sigma_target: float = 0.10
    tau: float = 0.0003
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def n_entries(self) -> int:
        return int(self.asset_index.numel())

    @property
    def n_assets(self) -> int:
        return int(self.next_returns.shape[0])

    @property
    def n_dates(self) -> int:
        return int(self.next_returns.shape[1])


def window_valid(valid_mask: np.ndarray, lookback: int) -> np.ndarray:
    """[assets, dates]: valid_mask holds on all `lookback` dates ending at t."""
    counts = np.cumsum(valid_mask.astype(np.int64), axis=1)
    padded = np.concatenate([np.zeros((valid_mask.shape[0], 1), dtype=np.int64), counts], axis=1)
    out = np.zeros_like(valid_mask, dtype=bool)
    if valid_mask.shape[1] >= lookback:
        out[:, lookback - 1:] = (padded[:, lookback:] - padded[:, :-lookback]) == lookback
    return out


def build_batch(
    panel: FeaturePanel,
    positions: np.ndarray,
    lookback: int,
    split_end: int,
    target_horizon: int = 21,
    sigma_target: float = 0.10,
    tau: float = 0.0003,
    window_ok: Optional[np.ndarray] = None,
) -> Batch:
    """
    Assemble the batch for decision dates at calendar `positions`.

    Returns realized after `split_end` (exclusive calendar position) and
    forward-vol targets reaching past it are excluded.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if window_ok is None:
        window_ok = window_valid(panel.valid_mask, lookback)
    A, T = panel.valid_mask.shape
    nxt_pos = positions + 1
    in_split = nxt_pos < min(split_end, T)
    next_returns = np.full((A, len(positions)), np.nan)
    next_returns[:, in_split] = panel.returns[:, nxt_pos[in_split]]
    active = window_ok[:, positions] & np.isfinite(next_returns)

    targets = panel.targets[:, positions, :].copy()
    targets[:, positions + target_horizon >= split_end, :] = np.nan

    asset_idx, date_idx = np.nonzero(active)
    if asset_idx.size:
        views = sliding_window_view(panel.features, lookback, axis=1)  # [A, T-L+1, F, L]
        windows = views[asset_idx, positions[date_idx] - lookback + 1]
        windows = np.ascontiguousarray(np.swapaxes(windows, 1, 2))
    else:
        windows = np.zeros((0, lookback, panel.n_features))

    return Batch(
        windows=as_tensor(windows),
        asset_index=torch.as_tensor(asset_idx, dtype=torch.long),
        date_index=torch.as_tensor(date_idx, dtype=torch.long),
        next_returns=as_tensor(next_returns),
        active=torch.as_tensor(active),
        targets=as_tensor(targets),
        positions=positions,
        sigma_target=sigma_target,
        tau=tau,
    )


@dataclass
class LossBreakdown:
    total: torch.Tensor
    sharpe: torch.Tensor
    aux: Dict[str, torch.Tensor]
    portfolio_returns: torch.Tensor


def run_model(
    model: MtlModel,
    windows: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    chunk_size: Optional[int] = None,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Model forward over many windows, optionally in chunks (inference)."""
    if chunk_size is None or windows.shape[0] <= chunk_size:
        return model(windows, generator)
    parts = [model(windows[i:i + chunk_size], generator) for i in range(0, windows.shape[0], chunk_size)]
    weights = torch.cat([w for w, _ in parts])
    aux = {k: torch.cat([a[k] for _, a in parts]) for k in parts[0][1]}
    return weights, aux


def weight_grid(batch: Batch, weights: torch.Tensor) -> torch.Tensor:
    """Scatter per-entry weights into [assets, dates]; inactive entries are 0."""
    grid = torch.zeros(batch.n_assets, batch.n_dates, dtype=DTYPE)
    return grid.index_put((batch.asset_index, batch.date_index), weights)


def total_loss(
    model: MtlModel,
    batch: Batch,
    generator: Optional[torch.Generator] = None,
    chunk_size: Optional[int] = None,
) -> LossBreakdown:
    """mu * sharpe_loss + lambda * sum of corr_loss over the active aux tasks."""
    cfg = model.config
    weights, aux = run_model(model, batch.windows, generator, chunk_size)
    returns = portfolio_return_net(
        weight_grid(batch, weights),
        batch.next_returns,
        batch.prev_weights,
        batch.sigma_target,
        batch.tau,
        batch.active,
    )
    returns = returns[batch.active.any(dim=0)]
    sharpe = sharpe_loss(returns)

    aux_losses: Dict[str, torch.Tensor] = {}
    aux_sum = torch.zeros((), dtype=DTYPE)
    for kind in cfg.active_aux_tasks:
        k = TARGET_KINDS.index(VolEstimatorKind(kind))
        realized = batch.targets[batch.asset_index, batch.date_index, k]
        if int(torch.isfinite(realized).sum()) < 2:
            logger.debug(f"{kind.value}: fewer than 2 targets in batch, skipped")
            continue
        aux_losses[kind.value] = corr_loss(aux[kind.value], realized)
        aux_sum = aux_sum + aux_losses[kind.value]

    total = cfg.mu * sharpe + cfg.lam * aux_sum
    return LossBreakdown(total, sharpe, aux_losses, returns)
