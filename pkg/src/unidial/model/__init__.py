from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ModelConfig, full_scale_profile, parameter_count
from .network import DecoderOutput, EncoderOutput, TextBatch, UnifiedDialogModel
