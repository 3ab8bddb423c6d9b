from functools import wraps

from django.core.management.base import CommandError

from .exceptions import LicbdError
from .models import ExperimentRun, ReportEntry, RunEvent


def tracked_run(func):
    """
    Decorator for ExperimentCommand.run_experiment(self, config, out_dir).

    Opens an ExperimentRun, records the report rows and artifacts of the
    RunResult, and marks the run completed or failed. Library errors become
    CommandError so the command exits non-zero with the message.
    """
    @wraps(func)
    def wrapper(self, config, out_dir, *args, **kwargs):
        run = ExperimentRun.start(self.subcommand, config, out_dir)
        RunEvent.log('run_started', run=run, description=f'{self.subcommand} into {out_dir}',
                     config_digest=run.config_digest)
        try:
            result = func(self, config, out_dir, *args, **kwargs)
        except LicbdError as e:
            run.fail(e)
            RunEvent.log('run_failed', run=run, description=str(e), severity='error')
            raise CommandError(str(e)) from e
        except Exception as e:
            run.fail(e)
            RunEvent.log('run_failed', run=run, description=str(e), severity='error')
            raise

        RunEvent.log('config_frozen', run=run, description='config.resolved.yaml',
                     path=str(result.out_dir / 'config.resolved.yaml'))
        for path in result.artifacts:
            action = 'checkpoint_saved' if str(path).endswith('.pt') else 'report_written'
            RunEvent.log(action, run=run, description=str(path))
        if result.rows:
            ReportEntry.bulk_record(run, result.rows)
        run.complete(result.summary)
        RunEvent.log('run_completed', run=run, description=f'{len(result.rows)} report rows')
        return result
    return wrapper
