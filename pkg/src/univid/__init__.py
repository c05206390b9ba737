"""Desk-scale video diffusion: pyramid spatial-temporal blocks, dual-stream
text/image conditioning, DDPM training and sampling on synthetic clips."""

import torch as _torch

# oneDNN selects different conv kernels per batch shape, which breaks the
# bitwise contracts this package guarantees (a video forward must equal the
# stacked per-frame forwards at identity initialization). The native CPU conv
# path is batch-invariant; at the tensor sizes used here the cost is noise.
_torch.backends.mkldnn.enabled = False

from .conditioning import (ConditionBundle, DualCrossAttention, ImageEncoder,
                           TemporalAttention, TextEncoder, Vocabulary)
from .dataio import (ClipDataset, ClipSpec, VideoCodec, gen_clip, load_checkpoint,
                     read_tensor, save_checkpoint, write_dataset, write_ppm, write_tensor)
from .diffusion import (NoiseSchedule, denoising_loss, make_schedule, q_sample,
                        reverse_step, strided_schedule)
from .metrics import first_frame_fidelity, psnr, temporal_smoothness
from .pyramid import (PSTAttention, PSTConv, PyramidLevel, PyramidSchedule,
                      ReferenceSet, build_reference_set, pst_attention, pst_conv,
                      schedule_for)
from .sampling import generate, lambda_sweep
from .training import Batch, StagePlan, run_stage, train_step
from .unet import (DenoiserUNet, ParameterStore, STBlock, UniVidModel,
                   select_trainable)

__version__ = "0.1.0"
