from licbd_app.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Rate-distortion and attack metrics of every available codec (verb: eval)'
    subcommand = 'eval'

    def report(self, result):
        super().report(result)
        for row in result.rows:
            if row['metric'] in ('bpp', 'psnr', 'asr', 'cosine') and row['value'] is not None:
                self.stdout.write(f"  {row['model']:<14} {row['attack']:<10} {row['metric']:<7} {row['value']:.4f}")
