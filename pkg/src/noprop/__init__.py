"""Block-local training of classifiers as denoising diffusion and flow-matching chains.

Each block learns to denoise a noisy class embedding given the input, from
its own local loss; no gradient crosses block boundaries.  Three variants are
provided (discrete-time, continuous-time, flow matching) plus an end-to-end
baseline over the same chain for comparison.
"""
from .autodiff import Graph, GradCheckReport, grad_check, relative_error
from .bundle import ModelBundle, build_bundle
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, default_config, make_config
from .data import DatasetHandle, load_idx, load_mnist, synth_blobs
from .embeddings import EmbeddingMatrix, Head, embed, init_prototype, radial_head, softmax_head
from .inference import (InferenceConfig, dt_forward_step, evaluate, infer_backprop, infer_ct, infer_dt,
                        infer_fm, predict)
from .optim import OptimizerConfig, ParamStore, optimizer_step
from .schedules import (DiscreteSchedule, TrainableGamma, cosine_alpha_bar, gamma_eval, gaussian_kl_to_standard,
                        posterior_coefficients, sample_q_marginal, snr, snr_diff)
from .trainers import (fm_loss, fm_loss_anchored, noprop_ct_loss, noprop_dt_loss, parallel_train_dt, train,
                       train_backprop_baseline, train_noprop_ct, train_noprop_dt, train_noprop_fm)

__version__ = "0.1.0"
