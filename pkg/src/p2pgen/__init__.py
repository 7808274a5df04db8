"""Point-to-point sequence generation: a conditional sequence VAE with a
learned prior, end-frame descriptor, time counter, control-point-consistency
loss posed on the prior, skip-frame training, and the matching evaluation
metric suite, on built-in synthetic low-dimensional datasets.
"""

from .data import (
    BouncingPointConfig,
    SequenceBatch,
    ToySkeletonConfig,
    gen_bouncing,
    gen_skeleton,
    read_sequences,
    split_rng,
    write_sequences,
)
from .layers import (
    GaussianHead,
    LSTMCell,
    Linear,
    MLPDecoder,
    MLPEncoder,
    init_params,
    lstm_step,
    reparam_sample,
)
from .metrics import (
    MetricsReport,
    confidence_interval,
    evaluate_model,
    mse,
    psnr,
    r_best,
    s_best,
    s_cpc,
    s_div,
    ssim,
)
from .model import (
    GenerationCondition,
    P2PModel,
    RolloutRecord,
    expected_parameter_count,
    generator_step,
    global_descriptor,
    load_checkpoint,
    loop_generate,
    make_condition,
    posterior_reconstruct,
    posterior_step,
    prior_step,
    sample_batch,
    sample_sequence,
    save_checkpoint,
    stitch_generate,
    time_counter,
    train_unroll,
)
from .objective import (
    LossBreakdown,
    ObjectiveConfig,
    alignment_loss,
    cpc_loss,
    full_objective,
    kl_gaussians,
    reconstruction_loss,
    skip_mask_sample,
)
from .optim import Adam, clip_grad_norm
from .tensor import Tape, Tensor, backward, tape
from .trainer import (
    ABLATION_FLAGS,
    RunConfig,
    load_run_config,
    parse_run_config,
    sample_training_length,
    train,
)

__version__ = "0.1.0"
