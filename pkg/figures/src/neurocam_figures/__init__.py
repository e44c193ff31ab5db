from neurocam_figures.figures import (FIGURE_IDS, FigureSpec, default_specs,
                                      render)

__all__ = ["FIGURE_IDS", "FigureSpec", "default_specs", "render"]
