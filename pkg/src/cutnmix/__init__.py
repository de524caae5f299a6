"""Cut^nMix mixed-sample augmentation with online peer distillation."""

from .augment import ImageBatch, MixedBatch, MixPlan, RectMask, SoftLabelBatch, apply_mix_plan, cutmix_batch, cutnmix_plan
from .datasets import Split, make_synthetic, read_cifar10, read_cifar100, shuffled_batches
from .evaluation import evaluate, evaluate_ensemble
from .losses import DistillConfig, dml_loss, kd_kl, mmd_loss, pt_loss, soft_ce, total_loss
from .models import build_student, build_teacher
from .trainer import OptimConfig, TrainConfig, lr_at, train

__version__ = "0.1.0"
