from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Estimate the per-frequency preprocessing sensitivity map'
    subcommand = 'sensitivity'

    def report(self, result):
        super().report(result)
        self.stdout.write(f"  zigzag rank correlation: {result.summary['zigzag_spearman']:.3f}")
