from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from licbd_app.decorators import tracked_run
from licbd_app.exceptions import LicbdError
from licbd_app.experiment import ExperimentConfig
from licbd_app.runner import run


class ExperimentCommand(BaseCommand):
    """
    Shared surface of the experiment commands:
    --config, --seed, --out and --device, with settings.LICBD_* as fallbacks.
    """

    subcommand = None

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            default=str(settings.LICBD_DEFAULT_CONFIG),
            help='Experiment YAML file (default: configs/desk.yaml)',
        )
        parser.add_argument('--seed', type=int, default=None, help='Override the experiment seed')
        parser.add_argument('--out', default=None, help='Output directory (overrides output_dir)')
        parser.add_argument('--device', default=None, help='Torch device, e.g. cpu or cuda:0')

    def load_config(self, options):
        defaults = {'seed': settings.LICBD_DEFAULT_SEED, 'device': settings.LICBD_DEVICE}
        config = ExperimentConfig.load(options['config'], defaults=defaults)
        output_dir = Path(config.output_dir)
        if not output_dir.is_absolute():
            output_dir = Path(settings.LICBD_OUTPUT_ROOT) / output_dir
        return config.override(seed=options['seed'], output_dir=options['out'] or output_dir,
                               device=options['device'])

    def handle(self, *args, **options):
        try:
            config = self.load_config(options)
        except LicbdError as e:
            raise CommandError(str(e)) from e

        self.stdout.write(f'{self.subcommand}: seed={config.seed} device={config.device} out={config.output_dir}')
        result = self.run_experiment(config, Path(config.output_dir))
        self.report(result)

    @tracked_run
    def run_experiment(self, config, out_dir):
        return run(self.subcommand, config, out_dir)

    def report(self, result):
        for path in result.artifacts:
            self.stdout.write(f'  wrote {path}')
        self.stdout.write(
            self.style.SUCCESS(f'{result.subcommand} finished: {len(result.rows)} report rows in {result.out_dir}')
        )
