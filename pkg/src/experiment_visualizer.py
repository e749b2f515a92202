"""
Experiment Visualizer - colored console display of training and evaluation runs.
"""

from datetime import datetime
from typing import Any, Dict, List, Mapping, Optional, Sequence

from colorama import Fore, Style, init as colorama_init

colorama_init()


class ExperimentVisualizer:
    """Console display for GVS runs: headers, epoch summaries, metric tables."""

    PHASE_COLORS = {
        "train": Fore.CYAN,
        "eval": Fore.MAGENTA,
        "sweep": Fore.YELLOW,
        "report": Fore.GREEN,
    }

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.epoch_rows: List[Dict[str, float]] = []

    def _print(self, text: str = "") -> None:
        if self.enabled:
            print(text)

    def show_experiment_header(self, title: str, details: Mapping[str, Any]):
        self._print(f"\n{Style.BRIGHT}{Fore.BLUE}{'=' * 80}{Style.RESET_ALL}")
        self._print(f"{Style.BRIGHT}{Fore.CYAN}🧪 {title.upper()}{Style.RESET_ALL}")
        self._print(f"{Style.BRIGHT}{Fore.BLUE}{'=' * 80}{Style.RESET_ALL}")
        for key, value in details.items():
            self._print(f"📋 {key}: {Style.BRIGHT}{value}{Style.RESET_ALL}")
        self._print(f"⏰ Started: {Style.BRIGHT}{datetime.now().strftime('%Y-%m-%d %H:%M:%S')}{Style.RESET_ALL}")
        self._print(f"{Fore.BLUE}{'=' * 80}{Style.RESET_ALL}\n")

    def show_epoch_header(self, epoch: int, max_epochs: int, phase: str = "train"):
        color = self.PHASE_COLORS.get(phase, Fore.WHITE)
        self._print(f"\n{Style.BRIGHT}{color}🔄 EPOCH {epoch}/{max_epochs}{Style.RESET_ALL}")
        self._print(f"{color}{'─' * 50}{Style.RESET_ALL}")

    def show_epoch_summary(self, epoch: int, losses: Mapping[str, float], phase: str = "train"):
        """One line per epoch with the mean of each tracked loss."""
        color = self.PHASE_COLORS.get(phase, Fore.WHITE)
        self.epoch_rows.append({"epoch": epoch, **losses})
        parts = "  ".join(f"{name}={value:.4f}" for name, value in losses.items())
        self._print(f"   {color}│{Style.RESET_ALL} epoch {epoch:3d}  {parts}")

    def show_metric_table(
        self,
        title: str,
        rows: Sequence[Mapping[str, Any]],
        columns: Optional[Sequence[str]] = None,
        phase: str = "eval",
    ):
        if not rows:
            self._print(f"{Fore.YELLOW}⚠️  {title}: no rows{Style.RESET_ALL}")
            return
        columns = list(columns or rows[0].keys())
        widths = [max(len(str(c)), *(len(self._fmt(r.get(c))) for r in rows)) for c in columns]

        color = self.PHASE_COLORS.get(phase, Fore.WHITE)
        self._print(f"\n{Style.BRIGHT}{color}📊 {title}{Style.RESET_ALL}")
        self._print("  ".join(f"{Style.BRIGHT}{str(c):<{w}}{Style.RESET_ALL}" for c, w in zip(columns, widths)))
        self._print("  ".join("─" * w for w in widths))
        for row in rows:
            row_color = Fore.RED if row.get("status") == "failed" or row.get("flagged") else ""
            cells = "  ".join(f"{self._fmt(row.get(c)):<{w}}" for c, w in zip(columns, widths))
            self._print(f"{row_color}{cells}{Style.RESET_ALL}")

    def show_status(self, message: str, success: bool = True):
        icon, color = ("✅", Fore.GREEN) if success else ("❌", Fore.RED)
        self._print(f"{color}{icon} {message}{Style.RESET_ALL}")

    @staticmethod
    def _fmt(value: Any) -> str:
        if isinstance(value, float):
            return f"{value:.4f}"
        return "" if value is None else str(value)
