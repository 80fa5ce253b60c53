"""Layout-conditioned pixel-space diffusion with zero-init adapters.

The package pretrains a small denoising U-Net unconditionally, then adapts
it for layout-to-image generation by inserting zero-initialized regional
attention blocks and task prompts, so the adapted model starts as an exact
identity wrap of the backbone and learns the conditioning on top.
"""

from .adapters import (AdapterConfig, ClassEmbeddingTable, ContextTokenTable,
                       LayoutAttentionBlock, TaskPromptSet, layout_attention,
                       make_context_tokens, prompted_cross_attention,
                       prompted_self_attention)
from .checkpoint import load_checkpoint, manifest_group_sums, read_manifest, save_checkpoint
from .dataset import (Dataset, SampleRecord, ShapeSpec, generate_dataset,
                      generate_sample, import_bbox_annotations, load_dataset,
                      palette, save_dataset)
from .evalmetrics import (MetricReport, box_score, evaluate, frechet_feature_distance,
                          frechet_gaussian_distance, image_features, layout_miou,
                          segment_by_palette)
from .experiments import (DataEfficiencyReport, EfficiencyReport, EvalSettings,
                          data_efficiency_experiment, efficiency_experiment)
from .layout import (Instance, Layout, RegionMaskSet, cached_rasterize, load_layout,
                     rasterize, save_layout, to_channel_mask)
from .netpbm import load_image, read_pgm, read_ppm, save_image, write_pgm, write_ppm
from .numerics import SeededRng, grad_check, masked_softmax, scaled_dot_attention, softmax
from .sampler import (CFG_MODES, SAMPLER_KINDS, SamplerConfig, cfg_combine, ddim_sample,
                      ddim_step, ddpm_sample, edit_sample, plms_sample, sample,
                      sample_batch, timestep_sequence)
from .schedule import NoiseSchedule, diffusion_loss, forward_diffuse, linear_schedule
from .training import (AdamState, RunLog, TrainConfig, TrainingDiverged, adam_step, train)
from .unet import (DenoiserModel, ParamReport, UNet, UNetConfig, insert_adapters,
                   param_report, predict_noise, to_concat_baseline)

__version__ = "0.1.0"
