from .Grid import WorldGrid, load_grid, save_grid
from .Tiler import Tiler, TileDataset, WindowSpec
from .UNet import UNet, UNetSpec
from .Trainer import Trainer, TrainConfig, MultiTaskSchedule
from .Synth import SynthConfig, gen_world
