# pyright: basic
"""Tests for the pipeline runner."""

from unittest.mock import MagicMock

from rich.console import Console

from attrdet.pipeline.runner import PipelineRunner

from .test_pipeline_base import MockStep


class TestPipelineRunner:
    """Test the PipelineRunner class."""

    def test_init_default_parameters(self):
        """Test initialization with default parameters."""
        console = MagicMock(spec=Console)
        runner = PipelineRunner([], console)

        assert runner.console is console
        assert runner.verbose is False
        assert runner.force is False
        assert runner.steps == []

    def test_run_all_steps_successful(self):
        """Test that every step runs in order."""
        console = MagicMock(spec=Console)
        steps = [MockStep(console, name="Step 1"), MockStep(console, name="Step 2")]
        runner = PipelineRunner(steps, console)

        assert runner.run() is True
        assert all(step.execute_called for step in steps)
        assert runner.failed_steps == []
        console.print.assert_any_call("[blue]Running 2 steps...[/blue]\n")
        console.print.assert_any_call("[dim](2/2)[/dim]", end=" ")
        console.print.assert_any_call(
            "\n[green]All steps completed successfully![/green]"
        )

    def test_run_stops_at_first_failure(self):
        """Test that steps after a failure are skipped."""
        console = MagicMock(spec=Console)
        steps = [
            MockStep(console, name="Step 1"),
            MockStep(console, name="Step 2", should_succeed=False),
            MockStep(console, name="Step 3"),
        ]
        runner = PipelineRunner(steps, console)

        assert runner.run() is False
        assert runner.failed_steps == ["Step 2"]
        assert steps[2].execute_called is False
        console.print.assert_any_call(
            "[yellow]Skipped after failure: Step 3[/yellow]"
        )
        console.print.assert_any_call("\n[red]Failed steps: Step 2[/red]")

    def test_force_passed_to_steps(self):
        """Test that force re-runs completed steps."""
        console = MagicMock(spec=Console)
        step = MockStep(console)
        step.is_completed_result = True

        PipelineRunner([step], console, force=True).run()
        assert step.execute_called is True

    def test_completed_steps_skipped(self):
        """Test that completed steps do not execute without force."""
        console = MagicMock(spec=Console)
        step = MockStep(console)
        step.is_completed_result = True

        assert PipelineRunner([step], console).run() is True
        assert step.execute_called is False
