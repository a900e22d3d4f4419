from .align import *
from .ode import *
from .evalkit import *
