"""
This exports the main entry points of the Conv-like ScaleFusion time series transformer
"""
from scalefusion_ts.patching import PatchConfig, schedule, length_interval, segment_of
from scalefusion_ts.model import ModelConfig, ModelParams, encode, forward_pyramid, pretrain, pretrain_loss
from scalefusion_ts.heads import FinetuneConfig, HeadBank, finetune, select_head
from scalefusion_ts.analysis import redundancy_report
from scalefusion_ts.config import RunConfig, load_config
