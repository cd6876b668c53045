"""Geometry-agnostic continuous speech separation toolkit."""

from .beamform import (apply_beamformer, gain_adjust, mvdr_weights,
                       sparsify_masks, spatial_covariances)
from .features import FeatureSequence, average_spectrum, extract_features
from .metrics import best_perm_si_snr, si_snr
from .model import (DESK_MODEL, PAPER_MODEL, MaskNet, ModelConfig,
                    estimate_masks, init_model, load_checkpoint,
                    parameter_count, save_checkpoint)
from .pipeline import (CssConfig, align_permutation, separate_continuous,
                       window_slices)
from .signals import (DEFAULT_STFT, DESK_STFT, MultichannelWaveform,
                      Spectrogram, StftConfig, istft, stft)
from .simulate import (ArrayGeometry, MixtureDataset, NoiseConfig, RoomSpec,
                       SimConfig, geometry_builtin, image_method_rir,
                       make_dataset, speech_like, synthesize_mixture)
from .training import TrainConfig, grad_step, train, upit_loss
from .wavio import read_wav, write_wav

__all__ = [name for name in dir() if not name.startswith("_")]
