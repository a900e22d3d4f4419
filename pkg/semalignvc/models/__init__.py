from .layers import *
from .semenc import *
from .encoder import *
from .semlm import *
from .acoustic import *
from .probe import *
from .vocoder import *
