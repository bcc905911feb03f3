export type Clock = () => number;

/** Wall-clock task timer with an injectable clock for tests. */
export class TaskTimer {
  private startedMs: number | null = null;

  constructor(private clock: Clock = () => Date.now()) {}

  start(): void {
    this.startedMs = this.clock();
  }

  get running(): boolean {
    return this.startedMs !== null;
  }

  startedAtIso(): string {
    if (this.startedMs === null) throw new Error("timer not started");
    return new Date(this.startedMs).toISOString();
  }

  elapsedSeconds(): number {
    if (this.startedMs === null) throw new Error("timer not started");
    return (this.clock() - this.startedMs) / 1000;
  }

  reset(): void {
    this.startedMs = null;
  }
}
