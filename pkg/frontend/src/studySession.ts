import { ApiClient, ApiError } from "./api";
import { TaskTimer, type Clock } from "./timer";
import type { QueryResponse, SessionSubmission, TaskInfo } from "./types";

export type SubmitOutcome = "submitted" | "queued" | "duplicate";

/**
 * Client-side state machine for one participant's study session.
 *
 * Tasks come from the service in a per-participant randomized order; the
 * timer starts when a task's first results render; satisfaction (1-5) is
 * required before submit; re-queries within a task are allowed and
 * counted. Submissions never carry any variant information: the server
 * derives the variant from (participant, task) on its side. Network
 * failures queue the submission for retry so a flaky connection cannot
 * lose a completed task.
 */
export class StudySessionController {
  tasks: TaskInfo[] = [];
  currentIndex = 0;
  satisfaction: number | null = null;
  requeryCount = 0;
  timerRestarted = false;
  readonly timer: TaskTimer;
  private submittedTasks = new Set<string>();
  private queue: SessionSubmission[] = [];
  private clock: Clock;

  constructor(
    private api: ApiClient,
    readonly participantId: string,
    clock?: Clock,
  ) {
    this.clock = clock ?? (() => Date.now());
    this.timer = new TaskTimer(this.clock);
  }

  /**
   * Fetch the task list and any server-side progress. After a reload the
   * already-submitted tasks are skipped and the next task carries the
   * restarted-timer flag, since the original timer state could not
   * survive the reload.
   */
  async loadTasks(): Promise<TaskInfo[]> {
    const body = await this.api.fetchTasks(this.participantId);
    this.tasks = body.tasks;
    this.currentIndex = 0;
    const progress = await this.api.fetchProgress(this.participantId);
    const done = new Set(progress.submitted_task_ids);
    if (done.size > 0) {
      for (const taskId of done) this.submittedTasks.add(taskId);
      while (
        this.currentIndex < this.tasks.length &&
        done.has(this.tasks[this.currentIndex].task_id)
      ) {
        this.currentIndex += 1;
      }
      this.timerRestarted = true; // resumed session: original timer lost
    }
    return this.tasks;
  }

  get currentTask(): TaskInfo {
    const task = this.tasks[this.currentIndex];
    if (!task) throw new Error("no active task");
    return task;
  }

  get progressLabel(): string {
    return `${Math.min(this.currentIndex + 1, this.tasks.length)}/${this.tasks.length}`;
  }

  get completedCount(): number {
    return this.submittedTasks.size;
  }

  /**
   * Run the task's retrieval through the study route (participant + task
   * ids only). The first render starts the timer; later calls within the
   * same task count as re-queries.
   */
  async runQuery(k = 10): Promise<QueryResponse> {
    const task = this.currentTask;
    const response = await this.api.searchByRecord(task.record_id, {
      k,
      participantId: this.participantId,
      taskId: task.task_id,
    });
    if (this.timer.running) {
      this.requeryCount += 1;
    } else {
      this.timer.start();
    }
    return response;
  }

  setSatisfaction(value: number): void {
    if (!Number.isInteger(value) || value < 1 || value > 5) {
      throw new Error(`satisfaction must be an integer 1..5, got ${value}`);
    }
    this.satisfaction = value;
  }

  get canSubmit(): boolean {
    return (
      this.timer.running &&
      this.satisfaction !== null &&
      !this.submittedTasks.has(this.currentTask.task_id)
    );
  }

  private buildSubmission(submittedAtIso: string): SessionSubmission {
    if (this.satisfaction === null) throw new Error("satisfaction not set");
    return {
      participant_id: this.participantId,
      task_id: this.currentTask.task_id,
      satisfaction: this.satisfaction,
      started_at: this.timer.startedAtIso(),
      submitted_at: submittedAtIso,
      duration_seconds: this.timer.elapsedSeconds(),
      requery_count: this.requeryCount,
      timer_restarted: this.timerRestarted,
    };
  }

  /**
   * Submit the current task. Duplicate submits are blocked client-side;
   * a network failure queues the payload and reports "queued".
   */
  async submitCurrent(): Promise<SubmitOutcome> {
    const taskId = this.currentTask.task_id;
    if (this.submittedTasks.has(taskId)) return "duplicate";
    if (!this.canSubmit) throw new Error("satisfaction required before submit");
    const submission = this.buildSubmission(new Date(this.clock()).toISOString());
    try {
      await this.api.submitSession(submission);
    } catch (err) {
      if (err instanceof ApiError) {
        if (err.status === 409) {
          this.submittedTasks.add(taskId); // server already has it
          return "duplicate";
        }
        throw err;
      }
      this.queue.push(submission); // offline: retry later
      this.submittedTasks.add(taskId);
      return "queued";
    }
    this.submittedTasks.add(taskId);
    return "submitted";
  }

  /** Retry queued submissions; returns how many are still pending. */
  async flushQueue(): Promise<number> {
    const pending = this.queue;
    this.queue = [];
    for (const submission of pending) {
      try {
        await this.api.submitSession(submission);
      } catch (err) {
        if (err instanceof ApiError && err.status === 409) continue;
        if (err instanceof ApiError) throw err;
        this.queue.push(submission);
      }
    }
    return this.queue.length;
  }

  get queuedCount(): number {
    return this.queue.length;
  }

  /** Move to the next task, resetting per-task state. True while tasks remain. */
  advance(): boolean {
    this.timer.reset();
    this.satisfaction = null;
    this.requeryCount = 0;
    this.timerRestarted = false;
    if (this.currentIndex + 1 >= this.tasks.length) {
      this.currentIndex = this.tasks.length;
      return false;
    }
    this.currentIndex += 1;
    return true;
  }

  get finished(): boolean {
    return this.tasks.length > 0 && this.submittedTasks.size >= this.tasks.length;
  }
}
