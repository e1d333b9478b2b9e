"""Direct LiDAR odometry by Gauss-Newton registration of 2.5D height grids."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DegenerateInput,
    DLOError,
    FormatError,
    InsufficientResiduals,
    InvalidNeighborhood,
    LengthMismatch,
    NearPiRotation,
    NoGroundPlane,
    NoSupport,
    NotConverged,
    OutOfBounds,
    SingularNormalMatrix,
)
from .heightgrid import GridConfig, HeightGrid, build_height_grid, select_semi_dense_cells  # noqa: E402
from .lie import Pose, exp_map, log_map  # noqa: E402
from .pointcloud import Scan, read_scan_file, write_scan_file  # noqa: E402
from .registration import RegistrationResult, SolverConfig, register  # noqa: E402
from .odometry import OdometryConfig, Trajectory, run_odometry  # noqa: E402
