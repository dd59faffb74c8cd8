"""Pipeline runner that executes steps in order."""

from typing import List, Sequence

from rich.console import Console

from ..pipeline import PipelineStep


class PipelineRunner:
    """Runs steps in order and stops at the first failure.

    Later steps consume what earlier ones produce, so nothing runs after a
    failed step.
    """

    def __init__(
        self,
        steps: Sequence[PipelineStep],
        console: Console,
        verbose: bool = False,
        force: bool = False,
    ) -> None:
        """Initialize the pipeline runner.

        Args:
            steps: Steps in execution order
            console: Rich console for output
            verbose: Enable verbose output
            force: Force re-run of steps even if completed
        """
        self.steps: List[PipelineStep] = list(steps)
        self.console = console
        self.verbose = verbose
        self.force = force
        self.failed_steps: List[str] = []

    def run(self) -> bool:
        """Run all steps.

        Returns:
            True if all steps completed successfully, False otherwise
        """
        self.console.print(f"[blue]Running {len(self.steps)} steps...[/blue]\n")
        self.failed_steps = []

        for i, step in enumerate(self.steps, 1):
            self.console.print(f"[dim]({i}/{len(self.steps)})[/dim]", end=" ")

            if not step.run(force=self.force):
                self.failed_steps.append(step.name)
                skipped = [s.name for s in self.steps[i:]]
                if skipped:
                    self.console.print(
                        f"[yellow]Skipped after failure: {', '.join(skipped)}[/yellow]"
                    )
                break

        if self.failed_steps:
            self.console.print(
                f"\n[red]Failed steps: {', '.join(self.failed_steps)}[/red]"
            )
            return False

        self.console.print("\n[green]All steps completed successfully![/green]")
        return True
