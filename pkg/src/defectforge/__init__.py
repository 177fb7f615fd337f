"""
Defect style transfer for surface defect simulation and the Buttonlab
segmentation network trained on the simulated samples.

Modules:
========
imagecore: Images, region masks, masked histogram matching and region fusion.
diffcore: The reverse-mode tensor engine, Adam and the tensor archive.
featurenet: The frozen convolutional feature extractor.
losses: Content, style, histogram and total variation losses.
transfernet: The transfer network and its fused output.
dstpipeline: Harmonization, transfer training and sample generation.
buttonlab: The segmentation network and its random-crop training.
evalkit: Pixelwise metrics and the scenario comparison.
synthdata: The procedural button benchmark.
gradsuite: Gradient checks of every training objective.
cli: The ``defectforge`` command.

Miscellaneous objects:
======================
    Except the above, all other objects in this module are to be considered implementation details.
"""

__version__ = '0.1.0'

__all__ = [
    'Image',
    'RegionMask',
    'SoftMask',
    'RunConfig',
    'load_config',
    'TransferNet',
    'SegNet',
    'coarse_harmonize',
    'train_dst',
    'generate_sample',
    'batch_generate',
    'train_seg',
    'predict',
    'evaluate_model',
    'run_comparison',
    'make_benchmark',
]

from .buttonlab import SegNet
from .buttonlab import predict
from .buttonlab import train_seg
from .config import RunConfig
from .config import load_config
from .dstpipeline import batch_generate
from .dstpipeline import coarse_harmonize
from .dstpipeline import generate_sample
from .dstpipeline import train_dst
from .evalkit import evaluate_model
from .evalkit import run_comparison
from .imagecore import Image
from .imagecore import RegionMask
from .imagecore import SoftMask
from .synthdata import make_benchmark
from .transfernet import TransferNet
