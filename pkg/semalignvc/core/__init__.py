from .handler import *
from .corpus import *
from .features import *
from .quantizer import *
from .textref import *
