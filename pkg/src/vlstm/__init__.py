"""Multi-timescale recurrent forecasters for long-memory series.

Core pieces: a small reverse-mode autodiff graph (:mod:`vlstm.ndcore`), LSTM,
VLSTM and msGRU cells sharing one set of equations (:mod:`vlstm.cells`),
exponential-sum kernel fits (:mod:`vlstm.kernels`), and the training, sweep,
selection and baseline tooling around them.
"""

from .cells import CellParams, init_params, param_count
from .data import SplitDates, VolSeries, WindowedDataset, load_csv, load_dataset, make_windows, standardize
from .kernels import ExpSumKernel, approx_error, ema, fit_exp_sum, geometric_timescales
from .model import ForecastModel, build_model, load_model, predict, predict_batch, save_model
from .sweep import ArchSpec, GridSpec, RunRecord, quantile_gap_select, run_grid, select_records, summarize
from .train import TrainConfig, TrainResult, early_stop, train_model

__version__ = "0.1.0"
