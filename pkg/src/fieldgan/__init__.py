"""fieldgan: a hypernetwork GAN over factorized-modulation radiance fields."""

from .autodiff import (AdamState, Tensor, adam_step, backward, finite_diff_check,
                       no_grad)
from .data import Dataset, PoseDistribution, SceneSpec, make_dataset, oracle_render
from .discriminator import DiscriminatorParams, discriminate
from .field import (FieldConfig, FieldParams, ModulationSet, RadianceBatch,
                    field_eval, fmm_apply, positional_encode)
from .hypernet import (GeneratorConfig, GeneratorParams, generate_modulations,
                       interpolate_latents, sample_latent)
from .meshing import DensityGrid, TriangleMesh, density_grid, marching_cubes, write_obj
from .metrics import image_stats, kid_poly, psnr
from .render import (CameraPose, Ray, RenderConfig, composite, make_camera_rays,
                     render_image, sample_depths)
from .training import (TrainConfig, TrainState, gan_step, init_train_state,
                       reconstruction_step, train_loop)

__all__ = [
    "AdamState", "Tensor", "adam_step", "backward", "finite_diff_check", "no_grad",
    "Dataset", "PoseDistribution", "SceneSpec", "make_dataset", "oracle_render",
    "DiscriminatorParams", "discriminate",
    "FieldConfig", "FieldParams", "ModulationSet", "RadianceBatch", "field_eval",
    "fmm_apply", "positional_encode",
    "GeneratorConfig", "GeneratorParams", "generate_modulations",
    "interpolate_latents", "sample_latent",
    "DensityGrid", "TriangleMesh", "density_grid", "marching_cubes", "write_obj",
    "image_stats", "kid_poly", "psnr",
    "CameraPose", "Ray", "RenderConfig", "composite", "make_camera_rays",
    "render_image", "sample_depths",
    "TrainConfig", "TrainState", "gan_step", "init_train_state",
    "reconstruction_step", "train_loop",
]
__version__ = "0.1.0"
